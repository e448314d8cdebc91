"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the layers the multi-stream network needs are provided. Every op accepts an
optional leading batch axis so a mini-batch runs through one BLAS call per layer.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class InputTooShortError(ValueError):
    """Time axis too short for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; each node appears once
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from a scalar loss.

    Gradients accumulate across calls; zero them between optimisation steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    order = _topo_order(loss)
    # interior grads are transient; leaves keep (and accumulate) theirs
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        if n is not loss:
            n.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g if b.shape == a.shape else np.sum(g).reshape(b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb if b.shape == a.shape else np.sum(gb).reshape(b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.array(np.sum(x.data)), (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.array(np.sum(x.data) / n), (x,), "mean", bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([x.data for x in xs], axis=axis), tuple(xs), "stack", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", bw)


# ---------------------------------------------------------------- layers


def conv1d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 zero-padded cross-correlation.

    x is (C_in, T) or (N, C_in, T); w is (C_out, C_in, K); b is (C_out,).
    """
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    if xd.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(f"conv1d: expected x (N,C,T) and w (O,C,K), got {x.shape}, {w.shape}")
    n, c_in, t = xd.shape
    c_out, w_cin, k = w.shape
    if w_cin != c_in:
        raise DimensionError(f"conv1d: input has {c_in} channels but weight expects {w_cin}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {b.shape} != ({c_out},)")
    if padding < 0:
        raise ValueError("conv1d: padding must be >= 0")
    t_out = t + 2 * padding - k + 1
    if t_out <= 0:
        raise InputTooShortError(f"conv1d: length {t} too short for kernel {k} with padding {padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    # unfolded input laid out (N, C*K, T_out) so every product is a batched matmul
    cols = np.ascontiguousarray(
        sliding_window_view(xp, k, axis=2).transpose(0, 1, 3, 2)
    ).reshape(n, c_in * k, t_out)
    w2 = w.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)
    out += b.data[None, :, None]

    def bw(g):
        g = g if batched else g[None]
        if w.requires_grad:
            gw = np.zeros((c_out, c_in * k))
            for i in range(n):  # fixed ascending accumulation over the batch
                gw += g[i] @ cols[i].T
            w._accumulate(gw.reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g).reshape(n, c_in, k, t_out)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + t_out] += dcols[:, :, j, :]
            dx = dxp[:, :, padding:padding + t] if padding else dxp
            x._accumulate(dx if batched else dx[0])

    return _make(out if batched else out[0], (x, w, b), "conv1d", bw)


def maxpool1d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping max pool over the last axis; trailing remainder dropped."""
    if k < 1:
        raise ValueError("maxpool1d: k must be >= 1")
    t = x.shape[-1]
    t_out = t // k
    if t_out == 0:
        raise InputTooShortError(f"maxpool1d: length {t} shorter than window {k}")
    lead = x.shape[:-1]
    win = x.data[..., : t_out * k].reshape(*lead, t_out, k)
    idx = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        dx[..., : t_out * k] = gw.reshape(*lead, t_out * k)
        x._accumulate(dx)

    return _make(out, (x,), "maxpool1d", bw)


def adaptive_avg_pool_to_1(x: Tensor) -> Tensor:
    """Mean over the last (time) axis: (C, T) -> (C,), (N, C, T) -> (N, C)."""
    t = x.shape[-1]
    if t < 1 or x.size == 0:
        raise InputTooShortError("adaptive_avg_pool_to_1: empty input")

    def bw(g):
        x._accumulate(np.broadcast_to(g[..., None] / t, x.shape))

    return _make(x.data.sum(axis=-1) / t, (x,), "avgpool", bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ W.T + b over the last axis of x; W is (M, N)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: x last dim {x.shape[-1:]} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        g2 = g.reshape(-1, w.shape[0])
        if w.requires_grad:
            w._accumulate(g2.T @ x.data.reshape(-1, w.shape[1]))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _make(out, (x, w, b), "linear", bw)


def softmax(e: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (boolean, same shape) drops entries: they get weight exactly 0,
    equivalent to a score of -inf.
    """
    z = e.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    ex = np.exp(z - m)
    a = ex / np.sum(ex, axis=-1, keepdims=True)

    def bw(g):
        # J^T g = a * (g - <g, a>)
        e._accumulate(a * (g - np.sum(g * a, axis=-1, keepdims=True)))

    return _make(a, (e,), "softmax", bw)


def weighted_sum(alpha: Tensor, v: Tensor) -> Tensor:
    """Attention fusion c = sum_i alpha_i v_i; alpha (..., S), v (..., S, F)."""
    if v.shape[:-1] != alpha.shape:
        raise DimensionError(f"weighted_sum: alpha {alpha.shape} vs features {v.shape}")
    out = np.einsum("...s,...sf->...f", alpha.data, v.data)

    def bw(g):
        if alpha.requires_grad:
            alpha._accumulate(np.einsum("...f,...sf->...s", g, v.data))
        if v.requires_grad:
            v._accumulate(alpha.data[..., None] * g[..., None, :])

    return _make(out, (alpha, v), "weighted_sum", bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), "dropout", bw)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logit: Tensor, label, pos_weight: float = 1.0) -> Tensor:
    """Elementwise weighted BCE on logits.

    loss = -[w*y*log(sigmoid(z)) + (1-y)*log(1-sigmoid(z))], evaluated as
    (1-y)*z + (1+(w-1)*y)*softplus(-z) so large |z| never overflows.
    """
    if pos_weight <= 0:
        raise ValueError("bce_with_logits: pos_weight must be positive")
    y = np.asarray(label, dtype=np.float64)
    if y.shape != logit.shape:
        y = np.broadcast_to(y, logit.shape)
    z = logit.data
    coef = 1.0 + (pos_weight - 1.0) * y
    out = (1.0 - y) * z + coef * _softplus(-z)

    def bw(g):
        sig_neg = np.exp(-_softplus(z))  # sigmoid(-z)
        logit._accumulate(g * ((1.0 - y) - coef * sig_neg))

    return _make(out, (logit,), "bce", bw)


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
