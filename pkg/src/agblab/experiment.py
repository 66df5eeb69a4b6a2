"""Declarative run configuration and the per-run manifest.

One JSON file describes a whole experiment (process constants, data
generation, network, training, evaluation, ablation). The schema is strict:
unknown keys are rejected with their field path, so typos fail before any
work starts. Flags on the command line override config keys.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import BACKBONE_KINDS, NetworkConfig
from .data import TREATMENTS, ScenarioParams
from .errors import ConfigError
from .process import ProcessParams
from .training import TrainConfig

OUTPUT_ROOT_ENV = "AGBLAB_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    n_locations: int = 8
    days: int = 60
    noise_std: float = 0.05
    treatments: tuple = TREATMENTS
    window: int = 16
    stride: int = 8
    fractions: dict = field(default_factory=lambda: {"train": 0.65, "val": 0.15,
                                                     "test": 0.2})

    def __post_init__(self):
        if self.n_locations < 1:
            raise ConfigError("data.n_locations", "must be >= 1")
        if self.days < self.window:
            raise ConfigError("data.days",
                              f"{self.days} days shorter than window {self.window}")
        if self.noise_std < 0:
            raise ConfigError("data.noise_std", "must be >= 0")
        unknown = [t for t in self.treatments if t not in TREATMENTS]
        if unknown:
            raise ConfigError("data.treatments", f"unknown treatment {unknown[0]!r}")
        if abs(sum(self.fractions.values()) - 1.0) > 1e-9:
            raise ConfigError("data.fractions", "must sum to 1")


@dataclass(frozen=True)
class AblateConfig:
    backbones: tuple = BACKBONE_KINDS
    hybrid_lambda: float = 0.25
    seeds: tuple = (42,)

    def __post_init__(self):
        unknown = [b for b in self.backbones if b not in BACKBONE_KINDS]
        if unknown:
            raise ConfigError("ablate.backbones", f"unknown backbone {unknown[0]!r}")
        if self.hybrid_lambda <= 0:
            raise ConfigError("ablate.hybrid_lambda", "must be > 0 for the hybrid")


@dataclass(frozen=True)
class EvalConfig:
    drought_threshold: float = 0.6

    def __post_init__(self):
        if not (0.0 < self.drought_threshold < 1.0):
            raise ConfigError("eval.drought_threshold", "must lie in (0, 1)")


# schema: section -> key -> caster. Casters raise ValueError on bad input.
def _num(x):
    return float(x)


def _int(x):
    if isinstance(x, bool) or int(x) != x:
        raise ValueError(f"expected an integer, got {x!r}")
    return int(x)


def _str(x):
    if not isinstance(x, str):
        raise ValueError(f"expected a string, got {x!r}")
    return x


def _pair(x):
    lo, hi = x
    return (float(lo), float(hi))


def _str_list(x):
    return tuple(_str(v) for v in x)


def _int_list(x):
    return tuple(_int(v) for v in x)


def _num_list(x):
    return [float(v) for v in x]


def _fraction_map(x):
    if not isinstance(x, dict):
        raise ValueError("expected a mapping of split name to fraction")
    return {str(k): float(v) for k, v in x.items()}


_SCHEMA = {
    "seed": _int,
    "output_dir": _str,
    "process": {"k": _num, "rue_bounds": _pair},
    "scenario": {
        "par_fraction": _num, "rue": _num, "lai_max": _num, "lai_rate": _num,
        "lai_mid_frac": _num, "bucket_capacity_mm": _num, "stress_full_mm": _num,
        "et_coeff": _num, "initial_agb": _num,
    },
    "data": {
        "n_locations": _int, "days": _int, "noise_std": _num,
        "treatments": _str_list, "window": _int, "stride": _int,
        "fractions": _fraction_map,
    },
    "network": {
        "backbone": _str, "hidden": _int_list, "kernel_size": _int,
        "activation": _str, "dropout": _num, "lai_cap": _num,
    },
    "train": {
        "lambda": _num, "lambda_grid": _num_list, "optimizer": _str, "lr": _num,
        "momentum": _num, "betas": _pair, "schedule": _str, "t_max": _int,
        "batch_size": _int, "max_iters": _int, "grad_clip": _num,
        "val_every": _int, "patience": _int, "collocation": _str,
    },
    "eval": {"drought_threshold": _num},
    "ablate": {"backbones": _str_list, "hybrid_lambda": _num, "seeds": _int_list},
}


def _validate_section(raw, schema, path):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    out = {}
    for key, value in raw.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(here, "unknown key")
        caster = schema[key]
        if isinstance(caster, dict):
            out[key] = _validate_section(value, caster, here)
        else:
            if value is None:
                out[key] = None
                continue
            try:
                out[key] = caster(value)
            except (TypeError, ValueError) as err:
                raise ConfigError(here, str(err))
    return out


@dataclass
class ExperimentConfig:
    seed: int = 42
    output_dir: str = "runs/run"
    process: ProcessParams = field(default_factory=ProcessParams)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    lambda_grid: list = None

    @classmethod
    def from_dict(cls, raw):
        clean = _validate_section(raw, _SCHEMA, "")
        seed = clean.get("seed", 42)
        train_raw = dict(clean.get("train", {}))
        lambda_grid = train_raw.pop("lambda_grid", None)
        if "lambda" in train_raw:
            train_raw["lambda_"] = train_raw.pop("lambda")
        net_raw = dict(clean.get("network", {}))
        proc = ProcessParams(**clean.get("process", {}))
        net_raw["rue_bounds"] = proc.rue_bounds
        try:
            return cls(
                seed=seed,
                output_dir=clean.get("output_dir", "runs/run"),
                process=proc,
                scenario=ScenarioParams(**clean.get("scenario", {})),
                data=DataConfig(**clean.get("data", {})),
                network=NetworkConfig(**net_raw),
                train=TrainConfig(seed=seed, **train_raw),
                eval=EvalConfig(**clean.get("eval", {})),
                ablate=AblateConfig(**clean.get("ablate", {})),
                lambda_grid=lambda_grid,
            )
        except TypeError as err:
            raise ConfigError("config", str(err))

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(str(path), "config file does not exist")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(str(path), f"not valid JSON: {err}")
        return cls.from_dict(raw)

    def resolved_output_dir(self, override=None):
        if override:
            return Path(override)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            return Path(root) / self.output_dir
        return Path(self.output_dir)

    def to_canonical_dict(self):
        d = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "process": asdict(self.process),
            "scenario": asdict(self.scenario),
            "data": asdict(self.data),
            "network": asdict(self.network),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "ablate": asdict(self.ablate),
            "lambda_grid": self.lambda_grid,
        }
        return d

    def config_hash(self):
        blob = json.dumps(self.to_canonical_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _atomic_write(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    """Start/completion record for one command; written atomically."""

    command: str
    config_hash: str
    version: str
    status: str = "running"
    started_at: str = ""
    finished_at: str = ""
    wall_seconds: float = 0.0
    dataset_hash: str = ""
    artifacts: dict = field(default_factory=dict)

    def _dump(self, path):
        _atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def start(self, path):
        self.status = "running"
        self.started_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self._t0 = time.perf_counter()
        self._dump(path)

    def complete(self, path, **artifacts):
        self.artifacts.update(artifacts)
        self.status = "complete"
        self.finished_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.wall_seconds = time.perf_counter() - getattr(self, "_t0", time.perf_counter())
        self._dump(path)
