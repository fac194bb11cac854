import gzip
import struct

import numpy as np
import pytest

from dsmix.data import (
    Dataset,
    band_edges,
    band_of,
    class_prototype,
    load_idx_dataset,
    synth_dataset,
    write_idx,
)
from dsmix.errors import ConsistencyError, FormatError, InvalidArgumentError
from dsmix.spectral import dct2, get_plan


def write_pair(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, images)
    write_idx(lp, labels)
    if gz:
        for p in (ip, lp):
            p.write_bytes(gzip.compress(p.read_bytes()))
    return ip, lp


def test_idx_roundtrip_and_scaling(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (5, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 9, 3, 3, 1], dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, labels)
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">4I", ip.read_bytes()[:16]) == (0x803, 5, 28, 28)
    d = load_idx_dataset(ip, lp)
    assert d.images.shape == (5, 28, 28, 1)
    assert d.images[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(d.images[..., 0], images / 255.0)
    np.testing.assert_array_equal(d.labels, labels)


def test_idx_gzip(tmp_path):
    images = np.zeros((2, 4, 4), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, np.array([1, 2], dtype=np.uint8), gz=True)
    assert len(load_idx_dataset(ip, lp)) == 2


def test_idx_errors(tmp_path):
    images = np.zeros((3, 4, 4), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, np.zeros(3, dtype=np.uint8))
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_idx_dataset(ip, lp)
    ip.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(FormatError):
        load_idx_dataset(ip, lp)
    ip.write_bytes(raw[:6])
    with pytest.raises(FormatError):
        load_idx_dataset(ip, lp)
    ip.write_bytes(raw)
    write_idx(lp, np.zeros(2, dtype=np.uint8))
    with pytest.raises(ConsistencyError):
        load_idx_dataset(ip, lp)


def test_dataset_invariants():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 4, 4, 1)), np.array([0, 5]), num_classes=3)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((0, 4, 4, 1)), np.zeros(0, dtype=int), num_classes=3)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.full((1, 4, 4, 1), np.nan), np.array([0]), num_classes=3)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((1, 4, 4, 1)), np.array([0]), num_classes=3, split="val")


def test_synth_determinism_and_balance():
    a = synth_dataset(3, 103, H_img=16, W_img=16)
    b = synth_dataset(3, 103, H_img=16, W_img=16)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=10)
    assert counts.max() - counts.min() <= 1
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    test = synth_dataset(3, 103, H_img=16, W_img=16, split="test")
    assert not np.array_equal(a.images, test.images)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(0, 5, num_classes=10)


def test_band_edges_partition_non_dc_diagonals():
    edges = band_edges(32, 32, 10)
    assert edges[0] == 1 and edges[-1] == 63
    assert np.all(np.diff(edges) >= 1)
    assert band_of(0, 1, edges) == 0 and band_of(31, 31, edges) == 9


@pytest.mark.parametrize("k", range(10))
def test_prototype_peak_lies_in_its_band(k):
    H = W = 32
    proto = class_prototype(k, H, W, 10)
    spec = np.abs(dct2(get_plan(H, W), proto))
    spec[0, 0] = 0.0
    u, v = np.unravel_index(spec.argmax(), spec.shape)
    assert band_of(u, v, band_edges(H, W, 10)) == k


def test_class_energy_concentrates_in_band():
    d = synth_dataset(1, 200, H_img=32, W_img=32, noise=0.0, distractor=0.0)
    edges = band_edges(32, 32, 10)
    u, v = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    bands = band_of(u, v, edges)
    plan = get_plan(32, 32)
    hits = 0
    for img, k in zip(d.images[..., 0], d.labels):
        spec = dct2(plan, img - img.mean()) ** 2
        energy = np.array([spec[bands == j].sum() for j in range(10)])
        hits += energy.argmax() == k
    assert hits / len(d) > 0.95
