"""Dense float32 tensors with hand-written reverse-mode gradients.

The op set is closed and small: exactly what the models need. Data is
stored row-major in float32; every reduction accumulates in float64 and
rounds once at the boundary. Graphs are recorded through per-op closures
(no general compiler); ``backward`` walks them in reverse topological
order from a scalar loss.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend as K

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # would promote 0-d to 1-d, so guard
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward through non-scalar")
        if self._done:
            raise RuntimeError("backward already run on this graph; reset grads first")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._ensure_grad()[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._done = True


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------- basic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

    def bwd(dy):
        if a.requires_grad:
            a._ensure_grad()[...] += dy
        if b.requires_grad:
            b._ensure_grad()[...] += dy

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

    def bwd(dy):
        if a.requires_grad:
            a._ensure_grad()[...] += dy * b.data
        if b.requires_grad:
            b._ensure_grad()[...] += dy * a.data

    return _make(a.data * b.data, (a, b), bwd)


def mul_const(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)

    def bwd(dy):
        if a.requires_grad:
            a._ensure_grad()[...] += dy * c32

    return _make(a.data * c32, (a,), bwd)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (shape ())."""
    if s.data.size != 1:
        raise ValueError("scale_by expects a scalar tensor")

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += dy * s.data
        if s.requires_grad:
            s._ensure_grad()[...] += np.float32(
                np.sum(dy.astype(np.float64) * x.data.astype(np.float64))
            )

    return _make(x.data * s.data, (x, s), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(dy):
        if a.requires_grad:
            a._ensure_grad()[...] += K.matmul(dy, np.ascontiguousarray(b.data.T))
        if b.requires_grad:
            b._ensure_grad()[...] += K.matmul(np.ascontiguousarray(a.data.T), dy)

    return _make(K.matmul(a.data, b.data), (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with bias folded into the accumulator."""

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += K.matmul(dy, np.ascontiguousarray(w.data.T))
        if w.requires_grad:
            w._ensure_grad()[...] += K.matmul(np.ascontiguousarray(x.data.T), dy)
        if b.requires_grad:
            b._ensure_grad()[...] += dy.astype(np.float64).sum(axis=0).astype(np.float32)

    return _make(K.matmul_bias(x.data, w.data, b.data), (x, w, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(dy):
        if a.requires_grad:
            a._ensure_grad()[...] += np.ascontiguousarray(dy.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += (dy.astype(np.float64) * K.gelu_grad(x.data)).astype(
                np.float32
            )

    return _make(K.gelu(x.data), (x,), bwd)


# ------------------------------------------------------------ shape surgery


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(dy):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * dy.ndim
                sl[axis] = slice(lo, hi)
                p._ensure_grad()[...] += dy[tuple(sl)]

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[sl] += dy

    return _make(x.data[sl].copy(), (x,), bwd)


def layer_slice(x: Tensor, idx: int) -> Tensor:
    """Select one slab along axis 0 of a stacked parameter tensor."""

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[idx] += dy

    return _make(x.data[idx].copy(), (x,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(dy):
        if table.requires_grad:
            np.add.at(table._ensure_grad(), ids, dy)

    return _make(table.data[ids].copy(), (table,), bwd)


gather_rows = embedding  # row gather by index is the same op


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += dy.reshape(x.data.shape)

    return _make(x.data.reshape(shape).copy(), (x,), bwd)


def pick(x: Tensor, idx: int) -> Tensor:
    """Scalar element of a 1-D tensor."""

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[idx] += np.float32(dy)

    return _make(np.float32(x.data[idx]).reshape(()), (x,), bwd)


def pad_repeat_last(x: Tensor, count: int) -> Tensor:
    if count == 0:
        data = x.data.copy()
    else:
        data = np.concatenate([x.data, np.repeat(x.data[-1:], count, axis=0)], axis=0)
    n = x.data.shape[0]

    def bwd(dy):
        if x.requires_grad:
            g = x._ensure_grad()
            g[...] += dy[:n]
            if count:
                g[-1] += dy[n:].astype(np.float64).sum(axis=0).astype(np.float32)

    return _make(data, (x,), bwd)


# -------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += dy  # dy is scalar-shaped, broadcasts

    return _make(np.float32(x.data.astype(np.float64).sum()).reshape(()), (x,), bwd)


def mean_axis0(x: Tensor) -> Tensor:
    n = x.data.shape[0]

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += (dy / np.float32(n))[None, :]

    return _make(
        (x.data.astype(np.float64).sum(axis=0) / n).astype(np.float32), (x,), bwd
    )


# ---------------------------------------------------------- softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(x.data).all():
        raise ValueError("non-finite input")
    axis = axis % x.data.ndim
    x64 = np.moveaxis(x.data.astype(np.float64), axis, -1)
    e = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    p64 = e / e.sum(axis=-1, keepdims=True)
    p = np.moveaxis(p64, -1, axis).astype(np.float32)

    def bwd(dy):
        if x.requires_grad:
            dy64 = np.moveaxis(dy.astype(np.float64), axis, -1)
            pm = np.moveaxis(p.astype(np.float64), axis, -1)
            dx = pm * (dy64 - (dy64 * pm).sum(axis=-1, keepdims=True))
            x._ensure_grad()[...] += np.moveaxis(dx, -1, axis).astype(np.float32)

    return _make(p, (x,), bwd)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax where masked (False) positions get probability exactly 0."""
    if not np.isfinite(x.data).all():
        raise ValueError("non-finite input")
    if mask.shape != x.data.shape:
        raise ValueError("mask shape mismatch")
    if not mask.any(axis=-1).all():
        raise ValueError("unattendable query")
    x64 = x.data.astype(np.float64)
    xm = np.where(mask, x64, -np.inf)
    mx = xm.max(axis=-1, keepdims=True)
    # clamp before exp so masked entries stay on the fast path; they are
    # zeroed exactly afterwards
    e = np.exp(np.minimum(x64 - mx, 0.0))
    e[~mask] = 0.0
    p = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)

    def bwd(dy):
        if x.requires_grad:
            dy64 = dy.astype(np.float64)
            p64 = p.astype(np.float64)
            dx = p64 * (dy64 - (dy64 * p64).sum(axis=-1, keepdims=True))
            x._ensure_grad()[...] += dx.astype(np.float32)

    return _make(p, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    d = x.data.shape[-1]
    if d == 0:
        raise ValueError("zero-length last axis")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("gain/bias must match last-axis extent")
    if not eps > 0:
        raise ValueError("eps must be positive")
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xn = (x64 - mean) * inv_std
    out = (xn * gain.data.astype(np.float64) + bias.data.astype(np.float64)).astype(
        np.float32
    )

    def bwd(dy):
        dy64 = dy.astype(np.float64)
        if gain.requires_grad:
            gain._ensure_grad()[...] += (dy64 * xn).reshape(-1, d).sum(axis=0).astype(
                np.float32
            )
        if bias.requires_grad:
            bias._ensure_grad()[...] += dy64.reshape(-1, d).sum(axis=0).astype(np.float32)
        if x.requires_grad:
            g = dy64 * gain.data.astype(np.float64)
            dx = inv_std * (
                g - g.mean(axis=-1, keepdims=True) - xn * (g * xn).mean(axis=-1, keepdims=True)
            )
            x._ensure_grad()[...] += dx.astype(np.float32)

    return _make(out, (x, gain, bias), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v with boolean mask over (queries, keys)."""
    if q.data.shape[1] != k.data.shape[1]:
        raise ValueError("query/key dims disagree")
    if k.data.shape[0] != v.data.shape[0]:
        raise ValueError("key/value counts disagree")
    if mask.shape != (q.data.shape[0], k.data.shape[0]):
        raise ValueError("mask shape must be (queries, keys)")
    scores = mul_const(matmul(q, transpose(k)), 1.0 / math.sqrt(q.data.shape[1]))
    probs = masked_softmax(scores, mask)
    return matmul(probs, v)


# -------------------------------------------------------------------- losses


def cross_entropy(student_logits: Tensor, teacher_probs: Tensor) -> Tensor:
    """Mean over rows of -sum(teacher * log_softmax(student))."""
    if student_logits.shape != teacher_probs.shape:
        raise ValueError("shape mismatch")
    tp = teacher_probs.data.astype(np.float64)
    if np.abs(tp.sum(axis=-1) - 1.0).max() > 1e-5 or (tp < 0).any():
        raise ValueError("teacher row not a distribution")
    z = student_logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    rows = z.shape[0]
    loss = np.float32(-(tp * logp).sum() / rows).reshape(())

    def bwd(dy):
        if student_logits.requires_grad:
            p = np.exp(logp)
            g = (p - tp) / rows * float(dy)
            student_logits._ensure_grad()[...] += g.astype(np.float32)

    return _make(loss, (student_logits, teacher_probs), bwd)


def smooth_l1(a: Tensor, b: Tensor, beta: float) -> Tensor:
    """Mean elementwise huber: 0.5 d^2/beta for |d| < beta, else |d| - 0.5 beta."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    absd = np.abs(d)
    small = absd < beta
    elems = np.where(small, 0.5 * d * d / beta, absd - 0.5 * beta)
    n = d.size
    loss = np.float32(elems.sum() / n).reshape(())

    def bwd(dy):
        g = np.where(small, d / beta, np.sign(d)) / n * float(dy)
        if a.requires_grad:
            a._ensure_grad()[...] += g.astype(np.float32)
        if b.requires_grad:
            b._ensure_grad()[...] -= g.astype(np.float32)

    return _make(loss, (a, b), bwd)


# ------------------------------------------------------------- conv / pool


def conv1d(x: Tensor, kernel: Tensor, stride: int, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation over the token axis: x (n,d) * kernel (k,d,dout)."""
    n = x.data.shape[0]
    ksz = kernel.data.shape[0]
    if ksz > n:
        raise ValueError("window exceeds sequence")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = K.conv1d(x.data, kernel.data, stride)
    if bias is not None:
        out = out + bias.data

    def bwd(dy):
        dx, dw = K.conv1d_bwd(x.data, kernel.data, stride, dy)
        if x.requires_grad:
            x._ensure_grad()[...] += dx
        if kernel.requires_grad:
            kernel._ensure_grad()[...] += dw
        if bias is not None and bias.requires_grad:
            bias._ensure_grad()[...] += dy.astype(np.float64).sum(axis=0).astype(np.float32)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bwd)


def avg_pool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """m = ceil(n/stride); a partial final window averages its true occupancy."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    n = x.data.shape[0]

    def bwd(dy):
        if x.requires_grad:
            x._ensure_grad()[...] += K.avg_pool1d_bwd(n, window, stride, dy)

    return _make(K.avg_pool1d(x.data, window, stride), (x,), bwd)
