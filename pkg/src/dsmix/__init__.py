"""Dynamic spectrum mixing (DSM) in numpy.

Token mixing by an orthonormal 2D DCT, a per-band weight mask produced from
the spectrum itself, and the inverse DCT; plus a small hierarchical backbone,
a training loop with hand-written gradients, benchmarks and ablations.
"""

from .errors import (
    ConfigError,
    ConsistencyError,
    CorruptionError,
    DSMError,
    FormatError,
    InvalidArgumentError,
    InvalidStateError,
    NumericError,
    ResourceLimitError,
    ShapeError,
    VersionError,
)
from .spectral import (
    DCTPlan,
    SpectrumGrid,
    ZigzagOrder,
    dct2,
    idct2,
    make_dct_plan,
    zigzag_flatten,
    zigzag_order,
    zigzag_unflatten,
)
from .dswg import DSWGParams, generate_mask, dswg_backward, init_dswg_params
from .model import DSMModel, ModelConfig, count_params_flops, dsm_mix, model_backward, model_forward
from .data import Dataset, load_idx_dataset, synth_dataset
from .train import TrainConfig, Trainer, adamw_step, cross_entropy, lr_at
from .checkpoint import load_checkpoint, save_checkpoint
from .bench import bench_dct, naive_dct2, run_ablation, sweep_spectrum_length
from .config import RunConfig, parse_config

__version__ = "0.1.0"
