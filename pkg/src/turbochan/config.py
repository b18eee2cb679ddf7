"""Experiment configuration: YAML in, frozen dataclass out.

Angles in config files are written in degrees; :meth:`ExperimentConfig.spatial_config`
converts them to the radians used internally. See ``configs/reference.yaml`` for
a complete example and the README for the schema.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .channel import SpatialConfig
from .learning import TrainConfig

__all__ = [
    "ESTIMATORS",
    "UniversalSpace",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "seed_for",
]

ESTIMATORS = (
    "ls", "v_only", "h_only", "arithmetic", "geometric", "genie",
    "turbo_dedicated", "turbo_universal",
)
MIN_K_EVAL = 1000
FULL_TRAIN_SLICES = 500_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UniversalSpace:
    """Randomization ranges for universal training (degrees and dB).

    A missing DoA range pins that angle to the spatial config's value.
    """

    name: str
    snr_range: tuple = (0.0, 15.0)
    doa_h_range: tuple = None
    doa_v_range: tuple = None
    eval_snr: float = None
    eval_iterations: int = None
    margin_band: tuple = None
    nmse_ceiling_db: float = None
    genie_gap_db: float = None

    def __post_init__(self):
        if self.eval_iterations is not None and int(self.eval_iterations) < 1:
            raise ConfigError(f"universal space {self.name!r}: eval_iterations must be >= 1")
        for key in ("snr_range", "doa_h_range", "doa_v_range", "margin_band"):
            value = getattr(self, key)
            if value is None:
                continue
            if len(value) != 2 or float(value[1]) < float(value[0]):
                raise ConfigError(f"universal space {self.name!r}: bad {key} {value!r}")
            object.__setattr__(self, key, (float(value[0]), float(value[1])))


@dataclass(frozen=True)
class ExperimentConfig:
    M: int = 8
    N: int = 16
    spread_v_deg: float = 1.0
    spread_h_deg: float = 2.0
    doa_v_deg: float = 50.0
    doa_h_deg: float = 20.0
    spacing: float = 0.5
    snr_grid: tuple = (0.0, 5.0, 10.0, 15.0)
    estimators: tuple = ("ls", "v_only", "h_only", "arithmetic", "geometric", "genie")
    iterations: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    train_slices: int = 200_000
    universal: tuple = ()
    universal_eval_snr: float = 0.0
    k_eval: int = 50_000
    seed: int = 0
    output: str = "out"
    allow_training: bool = True
    pdf_bins: int = 101

    def __post_init__(self):
        if self.k_eval < MIN_K_EVAL:
            raise ConfigError(f"k_eval must be at least {MIN_K_EVAL}")
        if not self.snr_grid:
            raise ConfigError("snr_grid must not be empty")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators: {sorted(unknown)}")
        if "turbo_universal" in self.estimators and not self.universal:
            raise ConfigError("turbo_universal needs at least one universal space")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.train_slices < self.train.window:
            raise ConfigError("train_slices must cover at least one window")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.spatial_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes):
        return replace(self, **changes)

    def spatial_config(self):
        return SpatialConfig(
            M=int(self.M), N=int(self.N),
            spread_v=np.deg2rad(self.spread_v_deg), spread_h=np.deg2rad(self.spread_h_deg),
            doa_v=np.deg2rad(self.doa_v_deg), doa_h=np.deg2rad(self.doa_h_deg),
            spacing=float(self.spacing),
        )

    @property
    def n_windows(self):
        return max(2, self.train_slices // self.train.window)

    def space(self, name):
        for sp in self.universal:
            if sp.name == name:
                return sp
        raise ConfigError(f"no universal space named {name!r}")

    def full_scale(self):
        return self.replace(train_slices=FULL_TRAIN_SLICES)

    def to_dict(self):
        d = asdict(self)
        d["snr_grid"] = [float(s) for s in self.snr_grid]
        d["estimators"] = list(self.estimators)
        d["universal"] = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(sp).items()}
            for sp in self.universal
        ]
        return d

    def hash(self):
        """SHA-256 of the canonical JSON form, ignoring where outputs go and
        whether missing chains may be trained."""
        d = self.to_dict()
        d.pop("output")
        d.pop("allow_training")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        train = data.pop("train", None) or {}
        if not isinstance(train, dict):
            raise ConfigError("train must be a mapping")
        train_known = {f.name for f in fields(TrainConfig)}
        if set(train) - train_known:
            raise ConfigError(f"unknown train keys: {sorted(set(train) - train_known)}")
        universal = data.pop("universal", None) or {}
        if isinstance(universal, list):  # the to_dict() form
            try:
                universal = {sp["name"]: {k: v for k, v in sp.items() if k != "name"}
                             for sp in universal}
            except (TypeError, KeyError) as exc:
                raise ConfigError("universal list entries need a name") from exc
        if not isinstance(universal, dict):
            raise ConfigError("universal must map space names to ranges")
        spaces = []
        for name, spec in universal.items():
            spec = dict(spec or {})
            bad = set(spec) - {f.name for f in fields(UniversalSpace)} - {"name"}
            if bad:
                raise ConfigError(f"universal space {name!r}: unknown keys {sorted(bad)}")
            spaces.append(UniversalSpace(name=str(name), **spec))
        if "estimators" in data:
            data["estimators"] = tuple(data["estimators"])
        if "snr_grid" in data:
            try:
                data["snr_grid"] = tuple(float(s) for s in data["snr_grid"])
            except (TypeError, ValueError) as exc:
                raise ConfigError("snr_grid must be a list of numbers") from exc
        try:
            return cls(train=TrainConfig(**train), universal=tuple(spaces), **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(data)


def seed_for(seed, *keys):
    """Derive an independent 32-bit seed from a base seed and integer keys."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(1)
    return int(state[0])
