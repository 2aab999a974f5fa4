"""Forward noising, the regularised training loop and the ancestral sampler."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .regularizers import NEEDS_INVERTIBLE, RegularizerSpec, SingularCovarianceError, total_loss
from .schedules import Schedule, ScheduleKind, build_schedule
from .synthetic_data import DatasetKind, generate
from .tensor_net import (
    DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN,
    DenoiserNet,
    EmaState,
    NonFiniteError,
    OptimizerState,
    adam_step,
    backward,
    ema_swap_for_sampling,
    ema_update,
    forward,
    init_adam,
    init_ema,
    init_net,
)

log = logging.getLogger(__name__)

# Fixed spawn keys so each consumer of randomness has its own stream. Switching
# the regularizer on or off leaves the data, timestep, noise and init draws
# untouched, which makes baseline/regularised runs matched pairs.
STREAMS = {"data": 0, "t": 1, "eps": 2, "init": 3, "sampler": 4, "mmd": 5, "dropout": 6}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


def q_sample(x0, t, eps, s: Schedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, row by row.

    ``t`` may be a scalar or one timestep per row; ``t = 0`` returns ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape or x0.ndim != 2:
        raise ValueError(f"x0 and eps must share an (N, d) shape, got {x0.shape} and {eps.shape}")
    t = np.asarray(t)
    if t.ndim not in (0, 1) or (t.ndim == 1 and t.shape[0] != x0.shape[0]):
        raise ValueError("t must be a scalar or hold one timestep per row")
    if np.any(t < 0) or np.any(t > s.T):
        raise ValueError(f"timesteps must lie in [0, {s.T}]")
    a = s.sqrt_alpha_bars[t]
    b = s.sqrt_one_minus_alpha_bars[t]
    if t.ndim == 1:
        a = a[:, None]
        b = b[:, None]
    return a * x0 + b * eps


@dataclass
class TrainConfig:
    dataset: DatasetKind = field(default_factory=DatasetKind)
    schedule: ScheduleKind = field(default_factory=ScheduleKind)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    batch_size: int = 256
    steps: int = 30000
    lr: float = 2e-4
    ema_decay: float = 0.9999
    clip_norm: float | None = 1.0
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    embed_dim: int = DEFAULT_EMBED_DIM
    dropout: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        d = 2
        if self.regularizer.active and self.regularizer.kind not in ("mean", "iso_trace_mean", "mmd"):
            if self.batch_size < d + 1:
                raise ValueError(
                    f"batch_size {self.batch_size} too small for the covariance-based "
                    f"{self.regularizer.kind} penalty (need >= {d + 1})"
                )

    def to_dict(self) -> dict:
        return {
            "data": self.dataset.to_dict(),
            "schedule": self.schedule.to_dict(),
            "regularizer": self.regularizer.to_dict(),
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr": self.lr,
            "ema_decay": self.ema_decay,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "hidden": list(self.hidden),
            "embed_dim": self.embed_dim,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        defaults = cls()
        return cls(
            dataset=DatasetKind.from_dict(d.get("data", {})),
            schedule=ScheduleKind.from_dict(d.get("schedule", {})),
            regularizer=RegularizerSpec.from_dict(d.get("regularizer", {})),
            batch_size=int(d.get("batch_size", defaults.batch_size)),
            steps=int(d.get("steps", defaults.steps)),
            lr=float(d.get("lr", defaults.lr)),
            ema_decay=float(d.get("ema_decay", defaults.ema_decay)),
            clip_norm=d.get("clip_norm", defaults.clip_norm),
            seed=int(d.get("seed", defaults.seed)),
            hidden=tuple(d.get("hidden", defaults.hidden)),
            embed_dim=int(d.get("embed_dim", defaults.embed_dim)),
            dropout=float(d.get("dropout", defaults.dropout)),
        )


@dataclass
class TrainLog:
    simple: np.ndarray
    penalty: np.ndarray
    # steps where a covariance penalty was skipped because the batch was degenerate
    skipped_penalty_steps: list[int] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return self.simple + self.penalty

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "simple_loss", "penalty", "total"])
            for i, (a, b) in enumerate(zip(self.simple, self.penalty), start=1):
                w.writerow([i, repr(float(a)), repr(float(b)), repr(float(a + b))])


@dataclass
class TrainResult:
    net: DenoiserNet
    ema: EmaState
    opt: OptimizerState
    log: TrainLog
    schedule: Schedule


def train(cfg: TrainConfig, data: np.ndarray | None = None, progress_every: int = 0) -> TrainResult:
    """Run the regularised noise-prediction training loop.

    Each step draws a minibatch of data rows, one timestep per row and fresh
    Gaussian noise, then takes a clipped Adam step on the batch loss and
    updates the EMA shadow. ``data`` overrides the configured dataset.
    """
    s = build_schedule(cfg.schedule)
    if data is None:
        data = generate(cfg.dataset)
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape

    data_rng = substream(cfg.seed, "data")
    t_rng = substream(cfg.seed, "t")
    eps_rng = substream(cfg.seed, "eps")
    mmd_rng = substream(cfg.seed, "mmd")
    drop_rng = substream(cfg.seed, "dropout") if cfg.dropout > 0 else None

    net = init_net(d, cfg.hidden, cfg.embed_dim, substream(cfg.seed, "init"), cfg.dropout)
    opt = init_adam(net, lr=cfg.lr, clip_norm=cfg.clip_norm)
    ema = init_ema(net, cfg.ema_decay)
    spec = cfg.regularizer

    simple_log = np.zeros(cfg.steps)
    pen_log = np.zeros(cfg.steps)
    skipped = []
    B = cfg.batch_size
    for step in range(1, cfg.steps + 1):
        x0 = data[data_rng.integers(0, n, size=B)]
        t = t_rng.integers(1, s.T + 1, size=B)
        eps = eps_rng.standard_normal((B, d))
        xt = q_sample(x0, t, eps, s)
        pred, cache = forward(net, xt, t, rng=drop_rng)
        try:
            loss = total_loss(eps, pred, spec, rng=mmd_rng)
        except SingularCovarianceError:
            if spec.kind not in NEEDS_INVERTIBLE:
                raise
            # e.g. the zero-initialised output layer at step 1
            skipped.append(step)
            loss = total_loss(eps, pred, RegularizerSpec("none", 0.0))
        if not math.isfinite(loss.value):
            raise NonFiniteError(f"non-finite loss at step {step}")
        grads = backward(net, cache, loss.grad)
        try:
            adam_step(net, grads, opt)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training aborted at step {step}: {exc}") from exc
        ema_update(ema, net)
        simple_log[step - 1] = loss.simple
        pen_log[step - 1] = loss.penalty
        if progress_every and step % progress_every == 0:
            lo = max(0, step - progress_every)
            log.info("step %d simple %.4f penalty %.5f", step,
                     simple_log[lo:step].mean(), pen_log[lo:step].mean())
    for p in net.params():
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("parameters became non-finite")
    return TrainResult(net, ema, opt, TrainLog(simple_log, pen_log, skipped), s)


SIGMA_MODES = ("posterior", "beta")


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 10000
    sigma: str = "posterior"
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample count must be >= 1")
        if self.sigma not in SIGMA_MODES:
            raise ValueError(f"sigma mode must be one of {SIGMA_MODES}")


def sample(
    net: DenoiserNet,
    ema: EmaState | None,
    s: Schedule,
    cfg: SamplerConfig,
    z_scale: float = 1.0,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``z_scale`` multiplies the injected noise; 0 makes every step the
    deterministic mean update.
    """
    model = ema_swap_for_sampling(net, ema) if (cfg.use_ema and ema is not None) else net
    rng = substream(cfg.seed, "sampler")
    x = rng.standard_normal((cfg.n, model.dim))
    sigmas = np.sqrt(s.posterior_vars if cfg.sigma == "posterior" else s.betas)
    for t in range(s.T, 0, -1):
        eps, _ = forward(model, x, t)
        x = (x - s.sampler_coef[t] * eps) / math.sqrt(s.alphas[t])
        if t > 1:
            x = x + (z_scale * sigmas[t]) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"sampler state became non-finite at t={t}")
    return x
