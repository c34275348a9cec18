"""Run configuration: every tunable of every stage, loaded from JSON.

A config file is a JSON object with optional sections

    {"seed": 0, "preset": "full" | "desk",
     "pca": {...}, "mfps": {...}, "filter": {...}, "features": {...},
     "net": {...}, "train": {...}, "denoise": {...}, "eval": {...}}

The top-level seed drives every stochastic stage (it overrides
``train.seed``). Missing keys keep their defaults (full-size values, or the desk-scale MFPS,
feature, network and training preset when ``"preset": "desk"``). Unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .denoise import DenoiseParams
from .errors import ConfigError
from .features import FeatureParams
from .filtering import FilterParams
from .mfps import MfpsParams
from .refine import DESK_NET, DESK_TRAIN, NetConfig, TrainConfig


@dataclass
class PcaParams:
    k: int = 100

    def __post_init__(self):
        if self.k < 3:
            raise ValueError("k must be >= 3")


@dataclass
class EvalParams:
    alphas: tuple[float, ...] = (5.0, 10.0)
    heatmap_max_deg: float = 30.0

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if any(a <= 0 for a in self.alphas) or self.heatmap_max_deg <= 0:
            raise ValueError("alphas and heatmap_max_deg must be positive")


# desk preset: a CPU-sized setup that trains in a couple of minutes on a few
# thousand-point clouds (smaller neighborhoods, capped patch size, small net)
DESK_MFPS = MfpsParams(scales=(20, 40, 60), classify_k=40, orient_k=30)
DESK_FEATURES = FeatureParams(max_pts=32)

SECTIONS = {
    "pca": PcaParams,
    "mfps": MfpsParams,
    "filter": FilterParams,
    "features": FeatureParams,
    "net": NetConfig,
    "train": TrainConfig,
    "denoise": DenoiseParams,
    "eval": EvalParams,
}


@dataclass
class Config:
    seed: int = 0
    preset: str = "full"
    pca: PcaParams = field(default_factory=PcaParams)
    mfps: MfpsParams = field(default_factory=MfpsParams)
    filter: FilterParams = field(default_factory=FilterParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoise: DenoiseParams = field(default_factory=DenoiseParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _section(name, cls, base, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {name!r}: {exc}") from None


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"seed", "preset"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    preset = data.get("preset", "full")
    if preset not in ("full", "desk"):
        raise ConfigError(f"preset must be 'full' or 'desk', got {preset!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = Config(seed=seed, preset=preset)
    if preset == "desk":
        cfg.mfps = replace(DESK_MFPS)
        cfg.features = replace(DESK_FEATURES)
        cfg.net = replace(DESK_NET)
        cfg.train = replace(DESK_TRAIN)
    for name, cls in SECTIONS.items():
        if name in data:
            setattr(cfg, name, _section(name, cls, getattr(cfg, name), data[name]))
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return config_from_dict(data)
