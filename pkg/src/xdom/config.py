"""Run configuration: one YAML tree mirroring :class:`RunConfig` exactly.

Unknown keys anywhere in the tree are rejected.  Missing keys take the
defaults below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data_synth import DatasetSpec
from .errors import ConfigError
from .model import TrainConfig
from .pseudo_mask import MaskConfig
from .scoring import SCORER_KINDS, FusionConfig, ScorerSpec


def _default_scorers():
    return [ScorerSpec(kind=k) for k in ("msp", "odin", "energy", "vim", "maxlogit")]


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_ood: int = 400
    ood_domain_empty_fraction: float = 0.0
    classifier: TrainConfig = field(default_factory=TrainConfig)
    dense: TrainConfig = field(default_factory=lambda: TrainConfig(random_scale=True))
    masks: MaskConfig = field(default_factory=MaskConfig)
    scorers: list[ScorerSpec] = field(default_factory=_default_scorers)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    temperature_sweep: tuple[float, ...] = (1.0, 2.5, 5.0, 10.0)
    tpr_level: float = 0.95
    histogram_scorer: str = "energy"
    histogram_bins: int = 30
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        self.dataset.validate()
        self.classifier.validate()
        self.dense.validate()
        self.masks.validate()
        self.fusion.validate()
        if self.n_ood <= 0:
            raise ConfigError("n_ood must be > 0")
        if not 0.0 <= self.ood_domain_empty_fraction <= 1.0:
            raise ConfigError("ood_domain_empty_fraction must lie in [0, 1]")
        if not self.scorers:
            raise ConfigError("at least one scorer is required")
        kinds = [s.validate().kind for s in self.scorers]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("scorer kinds must be unique")
        if self.histogram_scorer not in kinds:
            raise ConfigError(f"histogram_scorer {self.histogram_scorer!r} is not among the scorers")
        if any(t <= 0 for t in self.temperature_sweep):
            raise ConfigError("temperature_sweep values must be > 0")
        if not 0 < self.tpr_level <= 1:
            raise ConfigError("tpr_level must lie in (0, 1]")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be >= 1")
        return self

    def resolved(self):
        """Copy with every stage seed derived from the global seed."""
        cfg = dataclasses.replace(
            self,
            dataset=dataclasses.replace(self.dataset, seed=self.seed),
            classifier=dataclasses.replace(self.classifier, seed=self.seed + 1,
                                           deterministic=self.deterministic),
            dense=dataclasses.replace(self.dense, seed=self.seed + 2,
                                      deterministic=self.deterministic),
        )
        return cfg


# --------------------------------------------------------------------------
# dict <-> dataclass
# --------------------------------------------------------------------------

def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if origin is list:
            return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where="config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    return cls(**{k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()})


def to_dict(obj):
    """Plain nested dict/list tree (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(RunConfig, data).validate()


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def digest(obj) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


__all__ = ["RunConfig", "load_config", "dump_config", "from_dict", "to_dict", "digest",
           "SCORER_KINDS"]
