"""A small reverse-mode autodiff engine on top of numpy.

Only the operations the predictor and converter need are provided: affine
maps, time-delay (context-offset) layers, ReLU, statistics pooling, row
gathers and repeats, time padding and a squared-error loss. Each op records
a closure that maps the output gradient to gradients for its inputs;
``Tensor.backward`` replays them in reverse topological order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError

POOL_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf that requires it.

        The graph is released afterwards; calling again without a fresh
        forward pass raises ``RuntimeError``.
        """
        if self._consumed:
            raise RuntimeError("backward() called twice on the same graph; run forward again")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


# ---------------------------------------------------------------------------
# Elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=_bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=_bw)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, _parents=(a,), _backward=lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0).astype(x.data.dtype), _parents=(x,),
                  _backward=lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), _parents=(x,),
                  _backward=lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor(x.data.mean(), _parents=(x,),
                  _backward=lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences against a constant target."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return Tensor(np.mean(diff ** 2), _parents=(pred,),
                  _backward=lambda g: (g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# Affine maps and sequence layers


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., n) and ``w`` of shape (n, m)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")

    def _bw(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return Tensor(x.data @ w.data, _parents=(x, w), _backward=_bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis; works on a vector, a sequence or a batch."""
    return add(matmul(x, weight), bias)


def context_span(offsets) -> int:
    return max(offsets) - min(offsets)


def check_offsets(offsets) -> tuple[int, ...]:
    offsets = tuple(int(o) for o in offsets)
    if not offsets or 0 not in offsets or any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ValueError(f"context offsets must be strictly increasing and contain 0: {offsets}")
    return offsets


def splice(x: Tensor, offsets) -> Tensor:
    """Concatenate the frames at ``t + o`` for each offset, valid ``t`` only.

    Input (..., T, D) gives (..., T - span, len(offsets) * D).
    """
    offsets = check_offsets(offsets)
    lo, span = min(offsets), context_span(offsets)
    T, D = x.shape[-2], x.shape[-1]
    if T <= span:
        raise ValueError(f"need more than {span} frames for context {offsets}, got {T}")
    n_out = T - span
    starts = [o - lo for o in offsets]
    if len(offsets) == 1:
        return x
    out = np.concatenate([x.data[..., s:s + n_out, :] for s in starts], axis=-1)

    def _bw(g):
        gx = np.zeros_like(x.data)
        for i, s in enumerate(starts):
            gx[..., s:s + n_out, :] += g[..., i * D:(i + 1) * D]
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=_bw)


def tdnn_layer(x: Tensor, offsets, weight: Tensor, bias: Tensor) -> Tensor:
    """Time-delay layer: an affine map of spliced context frames.

    ``weight`` has shape (len(offsets) * D_in, D_out). No edge padding is
    done, so the output has ``T - span`` frames.
    """
    offsets = check_offsets(offsets)
    if weight.shape[0] != len(offsets) * x.shape[-1]:
        raise ValueError(f"weight rows {weight.shape[0]} != {len(offsets)} x {x.shape[-1]}")
    return dense(splice(x, offsets), weight, bias)


def stats_pooling(x: Tensor, eps: float = POOL_EPS) -> Tensor:
    """[mean || sqrt(population variance + eps)] over the frame axis (-2)."""
    T = x.shape[-2]
    if T < 1:
        raise ValueError("statistics pooling needs at least one frame")
    mu = x.data.mean(axis=-2, keepdims=True)
    centred = x.data - mu
    std = np.sqrt((centred ** 2).mean(axis=-2, keepdims=True) + eps)
    out = np.concatenate([mu, std], axis=-1).squeeze(-2)
    D = x.shape[-1]

    def _bw(g):
        g_mu = g[..., None, :D]
        g_std = g[..., None, D:]
        return ((g_mu + g_std * centred / std) / T,)

    return Tensor(out, _parents=(x,), _backward=_bw)


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the frame axis (-2)."""
    width = [(0, 0)] * x.data.ndim
    width[-2] = (left, right)
    T = x.shape[-2]
    return Tensor(np.pad(x.data, width), _parents=(x,),
                  _backward=lambda g: (g[..., left:left + T, :],))


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor, kernel: int = 3) -> Tensor:
    """Length-preserving 1-D convolution expressed as a zero-padded TDNN layer."""
    half = kernel // 2
    return tdnn_layer(pad_time(x, half, half), range(-half, half + 1), weight, bias)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    k = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise IndexError(f"ids must lie in [0, {k})")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(table.data[ids], _parents=(table,), _backward=_bw)


def repeat_frames(x: Tensor, counts) -> Tensor:
    """Repeat row ``t`` of a (N, E) sequence ``counts[t]`` times (counts >= 1)."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (x.shape[0],):
        raise ValueError(f"{len(counts)} durations for {x.shape[0]} tokens")
    if np.any(counts < 1):
        raise ValueError("durations must be >= 1")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return Tensor(np.repeat(x.data, counts, axis=0), _parents=(x,),
                  _backward=lambda g: (np.add.reduceat(g, starts, axis=0),))


# ---------------------------------------------------------------------------
# Parameter containers


def kaiming_uniform(rng, fan_in, shape, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Holds named trainable parameters and fixed (non-trainable) buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state.update({f"buffer/{name}": b.copy() for name, b in self.buffers.items()})
        return state

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for name, b in self.buffers.items():
            key = f"buffer/{name}"
            if key in state:
                self.buffers[name] = np.asarray(state[key]).astype(b.dtype, copy=True)
        return self

    def astype(self, dtype):
        """Cast parameters and buffers in place; returns ``self``."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, b in self.buffers.items():
            self.buffers[name] = b.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype


# ---------------------------------------------------------------------------
# Optimiser


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, cfg: AdamConfig):
    """One bias-corrected Adam update. Returns ``(new_params, state)``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g
        update = cfg.lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + cfg.eps)
        out.append((p - update).astype(p.dtype))
    return out, state


class Adam:
    def __init__(self, params, cfg: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        cfg = self.cfg if lr is None else replace(self.cfg, lr=lr)
        new, self.state = adam_step([p.data for p in self.params],
                                    [p.grad for p in self.params], self.state, cfg)
        for p, d in zip(self.params, new):
            p.data = d


# ---------------------------------------------------------------------------
# Gradient checking


def fd_check(loss_fn, params, h: float = 1e-6, max_elems: int | None = None, seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn()`` must rebuild the forward graph from ``params`` and return a
    scalar Tensor. Parameters must be float64. For each parameter tensor the
    error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
    the worst tensor's error is returned. ``max_elems`` checks a seeded random
    subset of entries per tensor.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("fd_check needs float64 parameters; cast the model first")
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        a = analytic.reshape(-1)[idx]
        n = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            n[j] = (up - down) / (2 * h)
        denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
        if denom > 0:
            worst = max(worst, float(np.max(np.abs(a - n)) / denom))
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# Checkpoint file: "LKBL", u32 version, u32 count, then per tensor
# {u32 name length, utf-8 name, u32 rank, u32 dims[rank], float32 LE payload}

CHECKPOINT_MAGIC = b"LKBL"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an LKBL checkpoint")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return out
