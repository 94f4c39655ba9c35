"""Run configuration: one JSON document, with dotted-key overrides from the command line."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .circuit import CircuitConfig
from .env import DuelConfig
from .policy import GapThresholds, TrainConfig
from .sim import SimConfig


@dataclass(frozen=True)
class CalibrationConfig:
    max_iters: int = 50
    tol: float = 1e-4
    pseudo_count: float = 1.0
    update_transitions: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; ``to_dict`` is the config echo written with every output."""

    out_dir: str = "run"
    base_seed: int = 2026
    n_races: int = 20
    circuit: CircuitConfig = field(default_factory=CircuitConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    p_burn: float = 0.55
    p_e_prior: float = 0.25
    theta_trap: float = 0.5
    use_gaps: bool = True
    gaps: GapThresholds = field(default_factory=GapThresholds)
    duel: DuelConfig = field(default_factory=DuelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval_races: int = 50
    eval_seed_base: int = 500_000
    sweep_side: str = "inference"

    def __post_init__(self):
        if self.sweep_side not in ("inference", "generator"):
            raise ValueError(f"sweep_side must be 'inference' or 'generator', got {self.sweep_side!r}")
        if self.n_races < 1 or self.eval_races < 1:
            raise ValueError("race counts must be positive")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        nested = {"circuit": CircuitConfig.from_dict, "sim": SimConfig.from_dict,
                  "duel": DuelConfig.from_dict, "train": TrainConfig.from_dict,
                  "gaps": lambda x: GapThresholds(**x), "calibration": lambda x: CalibrationConfig(**x)}
        for key, build in nested.items():
            if key in d and isinstance(d[key], dict):
                try:
                    d[key] = build(d[key])
                except TypeError as exc:
                    raise ValueError(f"bad keys in '{key}': {exc}") from None
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested dict (returns a copy)."""
    out = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    base = RunConfig().to_dict()
    if path is not None:
        user = json.loads(Path(path).read_text())
        base = _merge(base, user, "")
    return RunConfig.from_dict(apply_overrides(base, overrides))


def _merge(base: dict, user: dict, prefix: str) -> dict:
    out = dict(base)
    for k, v in user.items():
        if k not in base:
            raise ValueError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out
