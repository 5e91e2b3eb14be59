"""Learning-rate schedules, the Adam optimizer and named presets."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import yaml

from .errors import ArgumentError, ConfigError, NumericError

BETA1 = 0.9
BETA2 = 0.95
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LrSchedule:
    """``constant`` always returns ``min``. ``warmup_cosine`` ramps linearly from
    ``start`` to ``peak`` over ``warmup_steps`` and then follows a half cosine
    down to ``min`` at ``total_steps``."""

    kind: str
    peak: float
    min: float
    warmup_steps: int = 0
    total_steps: int = 1
    start: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "warmup_cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "warmup_cosine" and self.min > self.peak:
            raise ConfigError("min lr must not exceed peak lr")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ArgumentError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.min
    w = schedule.warmup_steps
    if step < w:
        return schedule.start + (schedule.peak - schedule.start) * step / w
    span = schedule.total_steps - w
    progress = 1.0 if span == 0 else (step - w) / span
    return schedule.min + 0.5 * (schedule.peak - schedule.min) * (1 + math.cos(math.pi * progress))


@dataclass
class OptState:
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict, grads: dict, state: OptState, lr: float) -> None:
    """One bias-corrected Adam update in place (beta1 0.9, beta2 0.95, eps 1e-8, no weight decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1 - BETA1**state.step
    c2 = 1 - BETA2**state.step
    for name in sorted(grads):
        g, p = grads[name], params[name]
        if g.shape != p.shape:
            raise ArgumentError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.exp_avg.setdefault(name, np.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= p.dtype.type(BETA1)
        m += p.dtype.type(1 - BETA1) * g
        v *= p.dtype.type(BETA2)
        v += p.dtype.type(1 - BETA2) * g * g
        denom = np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(ADAM_EPS)
        p -= p.dtype.type(lr / c1) * m / denom


# --- presets ------------------------------------------------------------------------


def load_presets() -> dict:
    text = resources.files("moe_upcycle").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def schedule_preset(name: str, total_steps: int) -> LrSchedule:
    """Build a named schedule stretched over ``total_steps``.

    Warmup length comes from the preset's ``warmup_fraction`` (rounded).
    """
    presets = load_presets()["schedules"]
    if name not in presets:
        raise ConfigError(f"unknown schedule preset {name!r}; known: {sorted(presets)}")
    return schedule_from_dict(presets[name], total_steps)


def schedule_from_dict(p: dict, total_steps: int) -> LrSchedule:
    p = dict(p)
    p.pop("note", None)
    frac = float(p.pop("warmup_fraction", 0.0))
    p.setdefault("warmup_steps", int(round(frac * total_steps)))
    p["total_steps"] = total_steps
    try:
        return LrSchedule(**{k: (float(v) if k in ("peak", "min", "start") else v) for k, v in p.items()})
    except TypeError as exc:
        raise ConfigError(f"bad schedule: {exc}") from None
