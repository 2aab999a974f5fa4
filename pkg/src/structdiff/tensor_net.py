"""MLP noise predictor with hand-written backprop, Adam, clipping and EMA.

The network maps ``(x_t, t)`` to a noise estimate of the same shape as
``x_t``. The timestep enters through a sinusoidal embedding concatenated to
the point coordinates; hidden layers use SiLU and the output layer is
linear. Weights are stored as ``(fan_in, fan_out)`` so a layer is
``h @ W + b``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

DEFAULT_HIDDEN = (128, 128, 128)
DEFAULT_EMBED_DIM = 64
CHECKPOINT_MAGIC = b"SDF1"


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from another forward pass or older weights."""


class NonFiniteError(FloatingPointError):
    """A gradient, loss or parameter stopped being finite."""


def time_embed(t, E: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal embedding of timestep(s) ``t``.

    Returns shape ``(E,)`` for a scalar ``t`` and ``(len(t), E)`` for an
    array. Channels come in ``(sin(t w_k), cos(t w_k))`` pairs with
    ``w_k = 10000 ** (-2k / E)``.
    """
    if E <= 0 or E % 2:
        raise ValueError(f"embedding size must be a positive even integer, got {E}")
    t_arr = np.asarray(t, dtype=np.float64)
    if T is not None and (np.any(t_arr < 1) or np.any(t_arr > T)):
        raise ValueError(f"timesteps must lie in [1, {T}]")
    freqs = 10000.0 ** (-2.0 * np.arange(E // 2) / E)
    ang = t_arr[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (E,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class DenoiserNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embed_dim: int = DEFAULT_EMBED_DIM
    dropout: float = 0.0
    version: int = field(default=0, compare=False)

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Parameters in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.embed_dim,
            self.dropout,
        )


def init_net(
    dim: int = 2,
    hidden=DEFAULT_HIDDEN,
    embed_dim: int = DEFAULT_EMBED_DIM,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> DenoiserNet:
    """Kaiming-uniform (fan-in) hidden weights, zero biases, zero output layer."""
    if embed_dim % 2:
        raise ValueError("embed_dim must be even")
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [dim + embed_dim, *hidden, dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == len(widths) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return DenoiserNet(weights, biases, embed_dim, dropout)


@dataclass
class ForwardCache:
    net_id: int
    version: int
    x: np.ndarray
    emb: np.ndarray
    inputs: list[np.ndarray]  # input to each layer after the first
    pre: list[np.ndarray]  # pre-activations of hidden layers
    masks: list[np.ndarray | None]
    used: bool = False


def forward(net: DenoiserNet, x, t, s=None, rng: np.random.Generator | None = None):
    """Predict noise for points ``x`` at timesteps ``t``.

    ``t`` is either a scalar shared by every row or one timestep per row.
    Passing a schedule ``s`` range-checks ``t`` against ``s.T``. Dropout is
    only applied when ``rng`` is given and ``net.dropout > 0``.

    Returns ``(eps_pred, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = net.weights[0].shape[0] - net.embed_dim
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected (N, {d}) input, got shape {x.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        emb = time_embed(t_arr, net.embed_dim, s.T if s is not None else None)[None, :]
    else:
        if t_arr.shape != (x.shape[0],):
            raise ValueError(f"need one timestep per row: got {t_arr.shape} for {x.shape[0]} rows")
        emb = time_embed(t_arr, net.embed_dim, s.T if s is not None else None)

    W0 = net.weights[0]
    h = x @ W0[:d] + emb @ W0[d:] + net.biases[0]
    inputs, pre, masks = [], [], []
    n_layers = len(net.weights)
    for i in range(1, n_layers):
        pre.append(h)
        a = h * expit(h)
        mask = None
        if rng is not None and net.dropout > 0:
            keep = 1.0 - net.dropout
            mask = (rng.uniform(size=a.shape) < keep) / keep
            a = a * mask
        masks.append(mask)
        inputs.append(a)
        h = a @ net.weights[i] + net.biases[i]
    cache = ForwardCache(id(net), net.version, x, emb, inputs, pre, masks)
    return h, cache


def backward(net: DenoiserNet, cache: ForwardCache, grad_out) -> list[np.ndarray]:
    """Parameter gradients (declaration order) for upstream gradient ``grad_out``."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache does not belong to the current parameters")
    if cache.used:
        raise StaleCacheError("cache was already consumed by a backward pass")
    cache.used = True
    g = np.asarray(grad_out, dtype=np.float64)
    n_layers = len(net.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, 0, -1):
        a_in = cache.inputs[i - 1]
        gW[i] = a_in.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if cache.masks[i - 1] is not None:
            g = g * cache.masks[i - 1]
        z = cache.pre[i - 1]
        sig = expit(z)
        g = g * (sig * (1.0 + z * (1.0 - sig)))
    d = cache.x.shape[1]
    gW0 = np.empty_like(net.weights[0])
    gW0[:d] = cache.x.T @ g
    if cache.emb.shape[0] == 1:
        gW0[d:] = cache.emb.T @ g.sum(axis=0, keepdims=True)
    else:
        gW0[d:] = cache.emb.T @ g
    gW[0] = gW0
    gb[0] = g.sum(axis=0)
    out = []
    for w, b in zip(gW, gb):
        out += [w, b]
    return out


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads, max_norm: float):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0


def init_adam(net: DenoiserNet, lr: float = 2e-4, clip_norm: float | None = 1.0, **kw) -> OptimizerState:
    params = net.params()
    return OptimizerState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
        clip_norm=clip_norm,
        **kw,
    )


def adam_step(net: DenoiserNet, grads, opt: OptimizerState) -> float:
    """Clip, then apply one bias-corrected Adam update in place.

    Returns the global gradient norm before clipping.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at optimizer step {opt.step + 1}")
    grads, norm = clip_by_global_norm(grads, opt.clip_norm)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(net.params(), grads, opt.m, opt.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    net.version += 1
    return norm


@dataclass
class EmaState:
    shadow: list[np.ndarray]
    decay: float = 0.9999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {self.decay}")


def init_ema(net: DenoiserNet, decay: float = 0.9999) -> EmaState:
    return EmaState([p.copy() for p in net.params()], decay)


def ema_update(ema: EmaState, net: DenoiserNet) -> EmaState:
    params = net.params()
    if len(params) != len(ema.shadow) or any(p.shape != s.shape for p, s in zip(params, ema.shadow)):
        raise ValueError("EMA shadow shapes do not match the network")
    for s, p in zip(ema.shadow, params):
        s *= ema.decay
        s += (1.0 - ema.decay) * p
    return ema


def ema_swap_for_sampling(net: DenoiserNet, ema: EmaState) -> DenoiserNet:
    """A copy of ``net`` carrying the EMA shadow weights."""
    if len(ema.shadow) != 2 * len(net.weights):
        raise ValueError("EMA shadow does not match the network layout")
    out = net.copy()
    for dst, src in zip(out.params(), ema.shadow):
        if dst.shape != src.shape:
            raise ValueError("EMA shadow shapes do not match the network")
        dst[...] = src
    return out


# -- checkpoint I/O ---------------------------------------------------------


def _write_arrays(fh, arrays):
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_arrays(buf, offset, shapes):
    out = []
    for shape in shapes:
        n = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        out.append(a)
        offset += 8 * n
    return out, offset


def save_checkpoint(path, net: DenoiserNet, ema: EmaState, opt: OptimizerState) -> None:
    """Binary layout: b"SDF1", u32 layer count, (u32 in, u32 out) per layer,
    f64 parameters, f64 EMA shadow, f64 Adam first moments, f64 Adam second
    moments, u64 step. Everything little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(net.weights)))
        for w in net.weights:
            fh.write(struct.pack("<II", *w.shape))
        _write_arrays(fh, net.params())
        _write_arrays(fh, ema.shadow)
        _write_arrays(fh, opt.m)
        _write_arrays(fh, opt.v)
        fh.write(struct.pack("<Q", opt.step))


def load_checkpoint(path, ema_decay: float = 0.9999, lr: float = 2e-4, clip_norm: float | None = 1.0):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Hyperparameters are not stored in the file and are supplied by the caller.
    Returns ``(net, ema, opt)``.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    (n_layers,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", buf, offset))
        offset += 8
    shapes = []
    for fan_in, fan_out in dims:
        shapes += [(fan_in, fan_out), (fan_out,)]
    params, offset = _read_arrays(buf, offset, shapes)
    shadow, offset = _read_arrays(buf, offset, shapes)
    m, offset = _read_arrays(buf, offset, shapes)
    v, offset = _read_arrays(buf, offset, shapes)
    (step,) = struct.unpack_from("<Q", buf, offset)
    if offset + 8 != len(buf):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    embed_dim = dims[0][0] - dims[-1][1]
    net = DenoiserNet(params[0::2], params[1::2], embed_dim)
    ema = EmaState(shadow, ema_decay)
    opt = OptimizerState(m, v, lr=lr, clip_norm=clip_norm, step=step)
    return net, ema, opt
