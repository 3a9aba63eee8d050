"""Run configuration: one JSON file covering every module's settings.

Parsing is strict: unknown keys anywhere raise ConfigError, so a typo cannot
silently fall back to a default.  Every field's default is the dataclass
default; `default_dict()` dumps the complete documented tree.
"""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .losses import LossConfig
from .network import NetConfig
from .phantoms import PhantomSpec
from .training import TrainSettings

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def resolve_out(path: str) -> str:
    """Honors the output-root override env var for relative paths."""
    root = os.environ.get("AMGFORMER_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path

# train-section keys; seed and out_dir live at the top level of the file
_TRAIN_KEYS = ("steps", "batch", "lr", "clip_norm", "checkpoint_every", "augment")


@dataclass
class EvalSettings:
    cases: int = 20            # held-out phantoms when no test dir is given
    case_seed: int = 777       # seed for the held-out set
    window: Optional[int] = None   # sliding-window size; None = whole volume
    overlap: float = 0.5
    combinations: str = "all"  # "all" (15 columns) or "full-only" (1 column)

    def __post_init__(self):
        if self.cases < 0:
            raise ConfigError(f"eval.cases must be >= 0, got {self.cases}")
        if self.combinations not in ("all", "full-only"):
            raise ConfigError(
                f"eval.combinations must be 'all' or 'full-only', got {self.combinations!r}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"eval.overlap must be in [0, 1), got {self.overlap}")


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _build(cls, section: dict, where: str, allowed=None):
    fields = _fields(cls)
    names = set(fields) if allowed is None else set(allowed)
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}; "
                          f"expected a subset of {sorted(names)}")
    kwargs = {}
    for key, value in section.items():
        # JSON has no tuples; dataclass defaults tell us where they belong
        default = fields[key].default
        if isinstance(value, list) and isinstance(default, tuple):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    precision: str = "f32"
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(
                f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def resolved_out_dir(self) -> str:
        return resolve_out(self.out_dir)

    def train_settings(self) -> TrainSettings:
        s = dataclasses.replace(self.train, seed=self.seed,
                                out_dir=self.resolved_out_dir())
        return s

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = {k: d["train"][k] for k in _TRAIN_KEYS}
        return d

    def config_hash(self) -> str:
        ident = self.to_dict()
        del ident["out_dir"]  # where results land is not part of the identity
        blob = json.dumps(ident, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def from_dict(data: dict, where: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(data).__name__}")
    top = {"seed", "out_dir", "precision", "net", "loss", "phantom", "train", "eval"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}; "
                          f"expected a subset of {sorted(top)}")
    for key in ("net", "loss", "phantom", "train", "eval"):
        if not isinstance(data.get(key, {}), dict):
            raise ConfigError(f"{where}.{key} must be a JSON object")
    sections = {
        "net": _build(NetConfig, data.get("net", {}), f"{where}.net"),
        "loss": _build(LossConfig, data.get("loss", {}), f"{where}.loss"),
        "phantom": _build(PhantomSpec, data.get("phantom", {}), f"{where}.phantom"),
        "train": _build(TrainSettings, data.get("train", {}), f"{where}.train",
                        allowed=_TRAIN_KEYS),
        "eval": _build(EvalSettings, data.get("eval", {}), f"{where}.eval"),
    }
    return RunConfig(seed=data.get("seed", 0),
                     out_dir=data.get("out_dir", "runs/run"),
                     precision=data.get("precision", "f32"),
                     **sections)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(data, where=str(path))


def default_dict() -> dict:
    """The complete config tree with every documented default."""
    return RunConfig().to_dict()
