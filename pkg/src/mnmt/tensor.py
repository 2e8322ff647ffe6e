"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure that maps the output gradient to the
input gradients. :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order.

Matrix products go through a numba kernel that accumulates every output
element over the inner dimension in ascending index order, so results are
bit-identical to a naive triple loop and independent of BLAS threading.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NumericError",
    "VocabError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "linear",
    "index_last",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "reshape",
    "transpose",
    "concat",
    "dropout",
    "dropout_rng",
    "cross_entropy",
    "masked_fill",
    "tsum",
    "mean",
    "no_grad",
    "set_debug",
    "raw_matmul",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An op was called outside its mathematical domain."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in an op output while debug checks are on."""


class VocabError(IndexError):
    """A token id is outside the embedding table."""


_DEBUG = os.environ.get("MNMT_DEBUG", "") not in ("", "0")
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks on every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


# ---------------------------------------------------------------------------
# matmul kernel
# ---------------------------------------------------------------------------


@njit(cache=True, boundscheck=False)
def _mm_kernel(a, b):  # pragma: no cover - compiled
    nb, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((nb, m, n))
    m4 = m - m % 4
    for bb in range(nb):
        A = a[bb]
        B = b[bb]
        O = out[bb]
        # four output rows share each loaded row of B; every O[i, j] still
        # accumulates over kk in ascending order
        for i in range(0, m4, 4):
            o0 = O[i]
            o1 = O[i + 1]
            o2 = O[i + 2]
            o3 = O[i + 3]
            for kk in range(k):
                x0 = A[i, kk]
                x1 = A[i + 1, kk]
                x2 = A[i + 2, kk]
                x3 = A[i + 3, kk]
                br = B[kk]
                for j in range(n):
                    bj = br[j]
                    o0[j] += x0 * bj
                    o1[j] += x1 * bj
                    o2[j] += x2 * bj
                    o3[j] += x3 * bj
        for i in range(m4, m):
            o0 = O[i]
            for kk in range(k):
                x0 = A[i, kk]
                br = B[kk]
                for j in range(n):
                    o0[j] += x0 * br[j]
    return out


def raw_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Broadcasting matrix product on plain arrays with fixed summation order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if b.ndim == 2:
        # fold all leading dims of a into rows: one big (rows, k) @ (k, n)
        lead = a.shape[:-2]
        out = _mm_kernel(np.ascontiguousarray(a.reshape(1, -1, k)), np.ascontiguousarray(b[None]))
        return out.reshape(*lead, m, n)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, k)).reshape(-1, m, k))
    b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, n)).reshape(-1, k, n))
    return _mm_kernel(a3, b3).reshape(*batch, m, n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DomainError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data)
    return _make(out, (x,), "masked_fill", lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = raw_matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(raw_matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = raw_matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(raw_matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-d weight, as one graph node."""
    if w.ndim != 2:
        raise ShapeError(f"linear expects a 2-d weight, got {w.shape}")
    out = raw_matmul(x.data, w.data)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias {b.shape} does not match weight {w.shape}")
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        k, n = w.shape
        g2 = g.reshape(-1, n)
        gx = raw_matmul(g, np.ascontiguousarray(w.data.T)) if x.requires_grad else None
        gw = raw_matmul(np.ascontiguousarray(x.data.reshape(-1, k).T), g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, "linear", backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def index_last(x: Tensor, axis: int = 1) -> Tensor:
    """Select the final position along ``axis`` (drops that axis)."""
    idx = [slice(None)] * x.ndim
    idx[axis] = -1
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), "index_last", backward)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DomainError("softmax over a row that is entirely -inf")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DomainError("log_softmax over a row that is entirely -inf")
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), "log_softmax", lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), "layer_norm", backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.max()) if ids.max() >= n else int(ids.min())
        raise VocabError(f"token id {bad} outside embedding table of size {n}")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), "embedding", backward)


def dropout_rng(seed: int, site: int, step: int) -> np.random.Generator:
    """Counter-based generator keyed on (global seed, call site, step)."""
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | ((int(site) & 0xFFFFFFFF) << 32) | (int(step) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. ``p == 0`` returns ``x`` unchanged."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout with p > 0 needs an explicit generator")
    mask = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _make(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token-level cross-entropy of ``logits[..., V]`` against integer ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise DomainError("cross_entropy: every target is ignored")
    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe_t = np.where(keep, t, 0)
    nll = lse - shifted[np.arange(t.size), safe_t]
    loss = float((nll * keep).sum() / count)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(t.size), safe_t] -= 1.0
        p *= (keep / count)[:, None]
        return ((g * p).reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), "cross_entropy", backward)
