"""Variance schedules and the per-timestep constants derived from them.

Timesteps are 1-based. Every array on :class:`Schedule` is indexed by the
timestep directly, so ``betas[t]`` is beta_t; slot 0 of the 1..T arrays holds
NaN and is never read. ``alpha_bars[0]`` is the empty product 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("linear", "cosine", "quadratic", "sigmoid")

COSINE_OFFSET = 0.008
COSINE_BETA_CLIP = (1e-8, 0.999)
SIGMOID_RANGE = (-6.0, 6.0)


class ScheduleError(ValueError):
    """Invalid schedule parameters or an out-of-range timestep."""


@dataclass(frozen=True)
class ScheduleKind:
    variant: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    T: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ScheduleError(f"unknown schedule {self.variant!r}; expected one of {VARIANTS}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ScheduleError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start < 1.0 and 0.0 < self.beta_end < 1.0):
            raise ScheduleError("beta bounds must lie in (0, 1)")
        if not self.beta_start < self.beta_end:
            raise ScheduleError(
                f"beta_start ({self.beta_start}) must be below beta_end ({self.beta_end})"
            )

    def to_dict(self) -> dict:
        return {
            "schedule": self.variant,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleKind":
        return cls(
            variant=d.get("schedule", "linear"),
            beta_start=float(d.get("beta_start", 1e-4)),
            beta_end=float(d.get("beta_end", 0.02)),
            T=int(d.get("T", 1000)),
        )


@dataclass(frozen=True, eq=False)
class Schedule:
    """All forward/reverse constants for one schedule, in float64.

    ``posterior_vars[t]`` is the fixed reverse variance
    (1 - abar_{t-1}) / (1 - abar_t) * beta_t; ``mean_coef_x0`` and
    ``mean_coef_xt`` are the coefficients of x_0 and x_t in the posterior
    mean; ``sampler_coef[t]`` = (1 - alpha_t) / sqrt(1 - abar_t) multiplies
    the predicted noise in the reverse update.
    """

    kind: ScheduleKind
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray
    mean_coef_x0: np.ndarray
    mean_coef_xt: np.ndarray
    sampler_coef: np.ndarray
    sqrt_alpha_bars: np.ndarray = field(repr=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.kind.T

    def alpha_bar_at(self, t: int) -> float:
        return alpha_bar_at(self, t)


def _raw_betas(kind: ScheduleKind) -> np.ndarray:
    T = kind.T
    b0, b1 = kind.beta_start, kind.beta_end
    if kind.variant == "linear":
        return np.linspace(b0, b1, T, dtype=np.float64)
    if kind.variant == "quadratic":
        return np.linspace(math.sqrt(b0), math.sqrt(b1), T, dtype=np.float64) ** 2
    if kind.variant == "sigmoid":
        u = np.linspace(*SIGMOID_RANGE, T, dtype=np.float64)
        return b0 + (b1 - b0) / (1.0 + np.exp(-u))
    # cosine: betas from a cos^2 curve on alpha_bar, normalised by its t=0 value
    s = COSINE_OFFSET
    ts = np.arange(T + 1, dtype=np.float64)
    f = np.cos((ts / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    abar = f / f[0]
    return np.clip(1.0 - abar[1:] / abar[:-1], *COSINE_BETA_CLIP)


def build_schedule(kind: ScheduleKind) -> Schedule:
    """Precompute every per-timestep constant for ``kind``."""
    T = kind.T
    raw = _raw_betas(kind)
    if not np.all((raw > 0.0) & (raw < 1.0)):
        raise ScheduleError("schedule produced betas outside (0, 1)")

    betas = np.full(T + 1, np.nan)
    betas[1:] = raw
    alphas = 1.0 - betas
    alpha_bars = np.empty(T + 1)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(alphas[1:])

    # 1 - abar accumulated in log space keeps full relative precision for tiny betas
    one_minus_ab = np.empty(T + 1)
    one_minus_ab[0] = 0.0
    one_minus_ab[1:] = -np.expm1(np.cumsum(np.log1p(-raw)))
    prev = alpha_bars[:-1]
    one_minus_prev = one_minus_ab[:-1]
    one_minus = one_minus_ab[1:]

    posterior_vars = np.full(T + 1, np.nan)
    posterior_vars[1:] = one_minus_prev / one_minus * raw
    mean_coef_x0 = np.full(T + 1, np.nan)
    mean_coef_x0[1:] = np.sqrt(prev) * raw / one_minus
    mean_coef_xt = np.full(T + 1, np.nan)
    mean_coef_xt[1:] = np.sqrt(alphas[1:]) * one_minus_prev / one_minus
    sampler_coef = np.full(T + 1, np.nan)
    sampler_coef[1:] = (1.0 - alphas[1:]) / np.sqrt(one_minus)

    arrays = dict(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
        mean_coef_x0=mean_coef_x0,
        mean_coef_xt=mean_coef_xt,
        sampler_coef=sampler_coef,
        sqrt_alpha_bars=np.sqrt(alpha_bars),
        sqrt_one_minus_alpha_bars=np.sqrt(one_minus_ab),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return Schedule(kind=kind, **arrays)


def alpha_bar_at(s: Schedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside [0, {s.T}]")
    return float(s.alpha_bars[t])
