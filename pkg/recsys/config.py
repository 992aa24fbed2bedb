"""
recsys/config.py

Configuration for the training pipeline and the service.

- key=value text files (one setting per line, '#' comments, blank lines ignored)
- typed dataclasses per pipeline stage, addressed in files with dotted keys
  (e.g. "als.rank=100", "hybrid.epochs=10")
- environment overrides: RECSYS_<SECTION>_<KEY> (e.g. RECSYS_ALS_RANK=32)
- forgiving coercion helpers for request parameters (safe_int / safe_bool)
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "RECSYS_"


# --- Helpers to safely parse incoming values ---
def safe_int(val, default=0):
    if val is None:
        return default
    if isinstance(val, bool):
        return int(val)
    if isinstance(val, int):
        return val
    if isinstance(val, float):
        try:
            return int(val)
        except Exception:
            return default
    if isinstance(val, str):
        s = val.strip()
        if s == "":
            return default
        try:
            return int(s)
        except ValueError:
            try:
                return int(float(s))
            except Exception:
                return default
    try:
        return int(val)
    except Exception:
        return default


def safe_bool(val, default=False):
    if isinstance(val, bool):
        return val
    if val is None:
        return default
    if isinstance(val, str):
        s = val.strip().lower()
        if s in ("true", "1", "yes", "y", "on"):
            return True
        if s in ("false", "0", "no", "n", "off"):
            return False
        return default
    try:
        return bool(val)
    except Exception:
        return default


def read_keyvalue_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse a key=value file into an ordered dict of raw strings.
    Repeated keys and lines without '=' are errors.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: Dict[str, str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{line_no}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def write_keyvalue_file(path: Union[str, Path], values: Mapping[str, Any]) -> None:
    path = Path(path)
    lines = [f"{k}={_format_value(v)}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def parse_value(raw: str, target_type: Any, key: str) -> Any:
    """Strict coercion used for config files: bad values raise ConfigError."""
    origin = getattr(target_type, "__origin__", None)
    if origin is Union:
        args = [a for a in target_type.__args__ if a is not type(None)]
        if raw.strip() == "":
            return None
        return parse_value(raw, args[0], key)
    try:
        if target_type is bool:
            s = raw.strip().lower()
            if s in ("true", "1", "yes", "y", "on"):
                return True
            if s in ("false", "0", "no", "n", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw.strip())
        if target_type is float:
            return float(raw.strip())
        if target_type is str:
            return raw.strip()
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported config type for {key}: {target_type!r}")


def apply_settings(obj, settings: Mapping[str, str], prefix: str = ""):
    """
    Return a copy of dataclass `obj` with dotted `settings` applied.
    Nested dataclass fields are addressed as "<field>.<subfield>".
    """
    hints = get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes: Dict[str, Any] = {}
    nested: Dict[str, Dict[str, str]] = {}
    for key, raw in settings.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = raw
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"config key {prefix + key!r} is a section")
            changes[head] = parse_value(raw, hints[head], prefix + key)
    for head, sub in nested.items():
        child = getattr(obj, head)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(f"config key {prefix + head!r} has no sub-keys")
        changes[head] = apply_settings(child, sub, prefix=f"{prefix}{head}.")
    return dataclasses.replace(obj, **changes)


def env_settings(obj, environ: Optional[Mapping[str, str]] = None,
                 prefix: str = ENV_PREFIX) -> Dict[str, str]:
    """Collect RECSYS_<SECTION>_<KEY> overrides that match fields of `obj`."""
    environ = os.environ if environ is None else environ
    found: Dict[str, str] = {}

    def walk(node, env_prefix: str, key_prefix: str):
        for f in dataclasses.fields(node):
            value = getattr(node, f.name)
            env_key = f"{env_prefix}{f.name.upper()}"
            if dataclasses.is_dataclass(value):
                walk(value, env_key + "_", f"{key_prefix}{f.name}.")
            elif env_key in environ:
                found[f"{key_prefix}{f.name}"] = environ[env_key]

    walk(obj, prefix, "")
    return found


def as_flat_dict(obj, prefix: str = "") -> Dict[str, Any]:
    """Flatten a (nested) config dataclass into dotted keys, in field order."""
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(as_flat_dict(value, prefix=f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


# -------------------------
# Stage configurations
# -------------------------
@dataclass(frozen=True)
class ALSConfig:
    rank: int = 100
    reg: float = 0.01
    alpha: float = 1.0
    iters: int = 15
    workers: int = 1


@dataclass(frozen=True)
class LocationConfig:
    rank: int = 10
    reg: float = 0.01
    alpha: float = 1.0
    iters: int = 15


@dataclass(frozen=True)
class Word2VecConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    min_count: int = 2
    step: float = 0.01
    batch_size: int = 512


@dataclass(frozen=True)
class CNNConfig:
    epochs: int = 10
    step: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seq_len: int = 64
    filters: int = 32
    hidden: int = 100


@dataclass(frozen=True)
class MLPConfig:
    epochs: int = 20
    step: float = 0.5
    momentum: float = 0.9
    batch_size: int = 32


@dataclass(frozen=True)
class HybridConfig:
    epochs: int = 10
    step: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    negative_ratio: int = 4
    max_retries: int = 100
    cf_dropout: float = 0.2
    holdout_fraction: float = 0.1
    variant: str = "attention"
    tau: float = 5.0


@dataclass(frozen=True)
class RefreshConfig:
    """Everything `refresh` needs besides the data and output directories."""
    seed: int = 0
    lookback_days: int = 20
    # reference time; None means "latest event timestamp"
    now: Optional[int] = None
    # comma-separated signal tokens to keep; empty keeps all (view_ad alone reproduces the views-only baseline)
    signals: str = ""
    als: ALSConfig = field(default_factory=ALSConfig)
    location: LocationConfig = field(default_factory=LocationConfig)
    word2vec: Word2VecConfig = field(default_factory=Word2VecConfig)
    cnn: CNNConfig = field(default_factory=CNNConfig)
    mlp: MLPConfig = field(default_factory=MLPConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)

    def __post_init__(self):
        if self.lookback_days <= 0:
            raise ConfigError("lookback_days must be > 0")
        if self.hybrid.variant not in ("attention", "linear"):
            raise ConfigError(f"hybrid.variant must be 'attention' or 'linear', got {self.hybrid.variant!r}")
        if not (0.0 < self.hybrid.holdout_fraction < 1.0):
            raise ConfigError("hybrid.holdout_fraction must be in (0, 1)")

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None,
             environ: Optional[Mapping[str, str]] = None, **overrides) -> "RefreshConfig":
        cfg = cls()
        if path is not None:
            cfg = apply_settings(cfg, read_keyvalue_file(path))
        cfg = apply_settings(cfg, env_settings(cfg, environ))
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        return cfg

    def signal_tokens(self) -> Tuple[str, ...]:
        return tuple(t.strip() for t in self.signals.split(",") if t.strip())
