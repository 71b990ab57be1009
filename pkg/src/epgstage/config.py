"""Run configuration: one JSON document covering every stage.

Defaults reproduce the desk-scale pipeline; any subset of keys may appear in
the file and overrides merge onto the defaults field by field.  All tuned
constants live here under their own names rather than inline in the code.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .preprocess import DiscardPolicy, OutlierConfig
from .signal_io import Phase, phase_from_name
from .synthgen import BackgroundSpec, GeneratorConfig, MotifProfile
from .trainer import TrainConfig


@dataclass
class EvalConfig:
    pool_lengths_s: tuple[int, ...] = (5, 30, 60, 120, 300, 600, 1200, 1800, 3600)
    smooth_s: float = 60.0
    report_pool_s: float = 5.0


@dataclass
class RunConfig:
    seed: int = 0
    n_pps: int = 5
    n_control: int = 2
    model: str = "Proposed4"
    model_overrides: dict = field(default_factory=dict)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    outliers: OutlierConfig = field(default_factory=OutlierConfig)
    discard: DiscardPolicy = field(default_factory=DiscardPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        # one seed drives generation, sampling and initialization unless the
        # sub-configs override it explicitly
        if self.generator.seed == 0:
            self.generator = dataclasses.replace(self.generator, seed=self.seed)
        if self.train.seed == 0:
            self.train.seed = self.seed


def _to_jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {
            (k.short_name if isinstance(k, Phase) else k): _to_jsonable(v)
            for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _merge_dataclass(template, data: dict):
    """Rebuild a dataclass with `data` overriding matching fields."""
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {type(template).__name__}, got {data!r}")
    kwargs = {}
    valid = {f.name: f for f in fields(template)}
    for key, value in data.items():
        if key not in valid:
            raise ValueError(
                f"unknown key {key!r} in {type(template).__name__}; "
                f"valid keys: {', '.join(sorted(valid))}"
            )
        current = getattr(template, key)
        kwargs[key] = _merge_value(current, value, key)
    merged = {f.name: getattr(template, f.name) for f in fields(template)}
    merged.update(kwargs)
    return type(template)(**merged)


def _merge_value(current, value, key: str):
    if is_dataclass(current) and not isinstance(current, type):
        return _merge_dataclass(current, value)
    if key == "class_profiles":
        out = dict(current)
        for name, profile in value.items():
            phase = phase_from_name(name)
            out[phase] = _merge_dataclass(out.get(phase, MotifProfile()), profile)
        return out
    if isinstance(current, tuple):
        return tuple(value)
    if key == "model_overrides":
        return dict(value)
    return type(current)(value) if current is not None else value


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults, overridden by whatever keys the JSON file provides."""
    cfg = RunConfig()
    if path is None:
        return cfg
    data = json.loads(Path(path).read_text())
    return _merge_dataclass(cfg, data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(_to_jsonable(cfg), indent=2, sort_keys=True) + "\n"


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(dump_config(RunConfig()))


# re-exported for convenience in configs and scripts
__all__ = [
    "RunConfig",
    "EvalConfig",
    "GeneratorConfig",
    "MotifProfile",
    "BackgroundSpec",
    "OutlierConfig",
    "DiscardPolicy",
    "TrainConfig",
    "load_config",
    "dump_config",
    "config_digest",
    "write_default_config",
]
