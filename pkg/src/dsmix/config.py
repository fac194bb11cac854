"""Run configuration: a ``key = value`` file plus command-line overrides.

Grammar: one assignment per line, ``#`` starts a comment, blank lines are
ignored. Lists are comma separated (brackets optional). Every key has a
default, so an empty file is a complete configuration. ``variant`` selects
the depth/width preset; explicit ``depths``/``widths`` win over it.

The resolved configuration is written back in the same grammar, so feeding
a snapshot to a later run reproduces it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ConfigError
from .model import PRESETS, ModelConfig, validate_model_config
from .train import TrainConfig


@dataclass(frozen=True)
class Options:
    """Data sources, outputs and command-specific knobs."""

    dataset: str = "synthetic"  # synthetic | idx
    n_train: int = 2000
    n_test: int = 1000
    data_seed: int = 0
    noise: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""  # eval / resume source
    checkpoint_every: int = 1  # epochs
    modes: tuple = ("dynamic", "allpass", "random")
    l_values: tuple = (4, 16, 32, 64)
    seeds: tuple = (0, 1, 2)
    bench_sizes: tuple = (32, 64, 128, 256)
    bench_repeats: int = 9
    image: str = ""  # spectrum: .npy / .png / IDX images file
    index: int = 0
    figures: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    options: Options = field(default_factory=Options)

    @property
    def seed(self) -> int:
        return self.train.seed


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_list(conv):
    def parse(text):
        text = text.strip().strip("[]()")
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(conv(t) for t in items)

    return parse


def _parse_optional_int(text):
    return None if text.lower() in ("none", "") else int(text)


def _str(text):
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


# key -> (section, parser, type name for messages)
_KEYS: dict[str, tuple[str, Callable[[str], Any], str]] = {}


def _register(section, cls, special=None):
    special = special or {}
    for f in dataclasses.fields(cls):
        if f.name in special:
            _KEYS[f.name] = (section, *special[f.name])
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            _KEYS[f.name] = (section, _parse_bool, "bool")
        elif isinstance(default, int):
            _KEYS[f.name] = (section, int, "integer")
        elif isinstance(default, float):
            _KEYS[f.name] = (section, float, "number")
        elif isinstance(default, tuple):
            conv = str if default and isinstance(default[0], str) else int
            _KEYS[f.name] = (section, _parse_list(conv), f"list of {conv.__name__}")
        else:
            _KEYS[f.name] = (section, _str, "string")


_register("model", ModelConfig, {"truncate_to": (_parse_optional_int, "integer or none"),
                                 "variant": (_str, "string")})
_register("train", TrainConfig, {"warmup_epochs": (float, "number")})
_register("options", Options)

KEYS = tuple(_KEYS)


def parse_assignments(text: str, source: str = "<config>") -> dict[str, tuple[Any, Optional[int]]]:
    """``{key: (value, line)}`` from config text; values are typed, not validated."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        out[key] = (_convert(key, value, lineno), lineno)
    return out


def _convert(key, value, line):
    if key not in _KEYS:
        raise ConfigError(f"unknown key (known keys: {', '.join(sorted(_KEYS))})", key=key, line=line)
    _, conv, type_name = _KEYS[key]
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {type_name}, got {value!r}", key=key, line=line) from None


def parse_override(item: str) -> tuple[str, Any]:
    """A ``key=value`` command-line override."""
    key, eq, value = item.partition("=")
    if not eq:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key = key.strip()
    return key, _convert(key, value.strip(), None)


def build_config(values: dict[str, tuple[Any, Optional[int]]]) -> RunConfig:
    """Assemble and validate a :class:`RunConfig` from typed assignments."""
    sections = {"model": {}, "train": {}, "options": {}}
    lines = {}
    for key, (value, line) in values.items():
        sections[_KEYS[key][0]][key] = value
        lines[key] = line
    m = sections["model"]
    variant = m.get("variant", "dsm-s-desk")
    if variant not in PRESETS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(PRESETS)}",
                          key="variant", line=lines.get("variant"))
    m = {**PRESETS[variant], **m, "variant": variant}
    try:
        model = ModelConfig(**m)
        train = TrainConfig(**sections["train"])
        options = Options(**sections["options"])
        validate_model_config(model)
        train.validate()
        _validate_options(options)
    except ConfigError as exc:
        if exc.key is not None and exc.line is None and lines.get(exc.key) is not None:
            raise ConfigError(str(exc).split(": ", 1)[1], key=exc.key, line=lines[exc.key]) from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, train=train, options=options)


def _validate_options(o: Options) -> None:
    if o.dataset not in ("synthetic", "idx"):
        raise ConfigError(f"must be 'synthetic' or 'idx', got {o.dataset!r}", key="dataset")
    for key in ("n_train", "n_test", "bench_repeats", "checkpoint_every"):
        if getattr(o, key) < 1:
            raise ConfigError("must be >= 1", key=key)
    if o.noise < 0:
        raise ConfigError("must be >= 0", key="noise")
    if not o.seeds:
        raise ConfigError("need at least one seed", key="seeds")
    if any(l < 1 for l in o.l_values):
        raise ConfigError("every l must be >= 1", key="l_values")
    if list(o.bench_sizes) != sorted(set(o.bench_sizes)) or any(s < 1 for s in o.bench_sizes):
        raise ConfigError("sizes must be positive and strictly ascending", key="bench_sizes")
    bad = [m for m in o.modes if m not in ("dynamic", "allpass", "random")]
    if bad:
        raise ConfigError(f"unknown mode(s) {bad}", key="modes")


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides on top."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError(f"{path}: not valid UTF-8") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        values.update(parse_assignments(text, str(path)))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = (value, None)
    return build_config(values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: RunConfig) -> str:
    """Every key with its resolved value, in the input grammar."""
    lines = ["# resolved configuration"]
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("options", cfg.options)):
        lines.append(f"# [{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    """One line per key: name, type and default."""
    default = RunConfig()
    rows = []
    for key, (section, _, type_name) in _KEYS.items():
        value = getattr(getattr(default, section), key)
        rows.append(f"{key:<18} {type_name:<16} {_format_value(value)}")
    return "\n".join(rows)


__all__ = ["Options", "RunConfig", "parse_config", "parse_assignments", "parse_override",
           "build_config", "render_config", "describe_keys", "KEYS"]
