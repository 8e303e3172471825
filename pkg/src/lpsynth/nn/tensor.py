"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the operations that produced it; calling
backward() on a scalar walks the graph once in reverse topological order and
accumulates gradients into .grad. Hot composite operations (attention,
layer norm, the halving convolution, cross-entropy) are single graph nodes
with hand-written backward passes.

The default dtype is float32 for training; tests switch to float64 with
using_dtype() when checking gradients against finite differences.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording (inference paths: search, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[], None]] = None
        self._parents: tuple = ()

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- graph ----------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                stack.append((p, False))
        self.accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # backward is one-shot: the op closures point back at their own
        # nodes, so an intact graph is cyclic garbage that waits for a
        # full gc pass -- at ~100MB of activations per training step that
        # overwhelms memory long before the collector runs.  Dropping the
        # links here lets reference counting free each step's graph as
        # soon as the caller releases the loss.
        for node in topo:
            node._backward = None
            node._parents = ()

    # -- elementwise / shape ops ----------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _node(self.data + other.data, (self, other))
        if out._parents:
            def back():
                if self.requires_grad or self._parents:
                    self.accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad or other._parents:
                    other.accumulate(_unbroadcast(out.grad, other.shape))
            out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _node(self.data * other.data, (self, other))
        if out._parents:
            def back():
                if self.requires_grad or self._parents:
                    self.accumulate(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad or other._parents:
                    other.accumulate(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _node(self.data / other.data, (self, other))
        if out._parents:
            def back():
                if self.requires_grad or self._parents:
                    self.accumulate(_unbroadcast(out.grad / other.data, self.shape))
                if other.requires_grad or other._parents:
                    other.accumulate(_unbroadcast(
                        -out.grad * self.data / (other.data ** 2), other.shape))
            out._backward = back
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        out = _node(self.data @ other.data, (self, other))
        if out._parents:
            def back():
                if self.requires_grad or self._parents:
                    g = out.grad @ np.swapaxes(other.data, -1, -2)
                    self.accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad or other._parents:
                    g = np.swapaxes(self.data, -1, -2) @ out.grad
                    other.accumulate(_unbroadcast(g, other.shape))
            out._backward = back
        return out

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))
        if out._parents:
            def back():
                g = np.zeros_like(self.data)
                np.add.at(g, key, out.grad)
                self.accumulate(g)
            out._backward = back
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            def back():
                self.accumulate(out.grad.reshape(self.shape))
            out._backward = back
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        out = _node(self.data.transpose(axes), (self,))
        if out._parents:
            def back():
                self.accumulate(out.grad.transpose(inverse))
            out._backward = back
        return out

    def swapaxes(self, a: int, b: int):
        out = _node(np.swapaxes(self.data, a, b), (self,))
        if out._parents:
            def back():
                self.accumulate(np.swapaxes(out.grad, a, b))
            out._backward = back
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            def back():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate(np.broadcast_to(g, self.shape).copy())
            out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        if out._parents:
            mask = self.data > 0.0
            def back():
                self.accumulate(out.grad * mask)
            out._backward = back
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _node(y, (self,))
        if out._parents:
            def back():
                self.accumulate(out.grad * (1.0 - y ** 2))
            out._backward = back
        return out

    def amax(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)
        out = _node(out_data, (self,))
        if out._parents:
            def back():
                g = out.grad if keepdims else np.expand_dims(out.grad, axis)
                full = np.zeros_like(self.data)
                np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
                self.accumulate(full)
            out._backward = back
        return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        tracked = tuple(p for p in parents
                        if p.requires_grad or p._parents or p._backward)
        if tracked:
            out._parents = tracked
    return out


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out._parents:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def back():
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad or t._parents:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(a, b)
                    t.accumulate(out.grad[tuple(index)])
        out._backward = back
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = _node(table.data[ids], (table,))
    if out._parents:
        def back():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1),
                      out.grad.reshape(-1, table.data.shape[-1]))
            table.accumulate(g)
        out._backward = back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _node(p, (x,))
    if out._parents:
        def back():
            dot = (out.grad * p).sum(axis=axis, keepdims=True)
            x.accumulate(p * (out.grad - dot))
        out._backward = back
    return out


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy log-softmax for inference scoring."""
    m = logits.max(axis=axis, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, one fused node."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta))
    if out._parents:
        def back():
            d = x.data.shape[-1]
            gy = out.grad * gamma.data
            if gamma.requires_grad or gamma._parents:
                gamma.accumulate(_unbroadcast(out.grad * xhat, gamma.shape))
            if beta.requires_grad or beta._parents:
                beta.accumulate(_unbroadcast(out.grad, beta.shape))
            if x.requires_grad or x._parents:
                mean_gy = gy.mean(axis=-1, keepdims=True)
                mean_gyx = (gy * xhat).mean(axis=-1, keepdims=True)
                x.accumulate(inv * (gy - mean_gy - xhat * mean_gyx))
        out._backward = back
    return out


def attention(q: Tensor, k: Tensor, v: Tensor,
              keep: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q kᵀ / √d) v in one node.

    q: (..., Lq, d), k/v: (..., Lk, d); keep is a boolean mask broadcastable to
    (..., Lq, Lk), True where attending is allowed. Rows with nothing to attend
    to produce zeros.
    """
    d = q.data.shape[-1]
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) / np.sqrt(d)
    if keep is not None:
        scores = np.where(keep, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - np.where(np.isfinite(m), m, 0.0))
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / np.maximum(denom, np.finfo(e.dtype).tiny)
    out = _node(probs @ v.data, (q, k, v))
    if out._parents:
        def back():
            gv = np.swapaxes(probs, -1, -2) @ out.grad
            gp = out.grad @ np.swapaxes(v.data, -1, -2)
            gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
            gs /= np.sqrt(d)
            if q.requires_grad or q._parents:
                q.accumulate(_unbroadcast(gs @ k.data, q.shape))
            if k.requires_grad or k._parents:
                k.accumulate(_unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape))
            if v.requires_grad or v._parents:
                v.accumulate(_unbroadcast(gv, v.shape))
        out._backward = back
    return out


def conv1d_half(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Kernel-3 stride-2 convolution with single-sided-pair padding.

    x: (B, L, Din), w: (3, Din, Dout), b: (Dout,);
    output length is ceil(L / 2) for every L ≥ 1.
    """
    B, L, Din = x.data.shape
    T = (L + 1) // 2
    xp = np.pad(x.data, ((0, 0), (1, 1), (0, 0)))
    idx = 2 * np.arange(T)[:, None] + np.arange(3)[None, :]  # (T, 3)
    windows = xp[:, idx, :]  # (B, T, 3, Din)
    out = _node(np.einsum("btkd,kde->bte", windows, w.data) + b.data, (x, w, b))
    if out._parents:
        def back():
            if w.requires_grad or w._parents:
                w.accumulate(np.einsum("btkd,bte->kde", windows, out.grad))
            if b.requires_grad or b._parents:
                b.accumulate(out.grad.sum(axis=(0, 1)))
            if x.requires_grad or x._parents:
                gxp = np.zeros_like(xp)
                contrib = np.einsum("bte,kde->btkd", out.grad, w.data)
                np.add.at(gxp, (slice(None), idx), contrib)
                x.accumulate(gxp[:, 1 : L + 1, :])
        out._backward = back
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          ignore_id: Optional[int] = 0) -> Tensor:
    """Mean token-level cross entropy; positions equal to ignore_id drop out."""
    targets = np.asarray(targets)
    flat = logits.data.reshape(-1, logits.data.shape[-1])
    t = targets.reshape(-1)
    valid = np.ones_like(t, dtype=bool) if ignore_id is None else (t != ignore_id)
    n = int(valid.sum())
    m = flat.max(axis=-1, keepdims=True)
    s = flat - m
    logp = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
    if n == 0:
        loss = 0.0
    else:
        loss = -logp[np.arange(t.size), np.clip(t, 0, None)][valid].mean()
    out = _node(np.asarray(loss, dtype=flat.dtype), (logits,))
    if out._parents:
        def back():
            if n == 0:
                return
            g = np.exp(logp)
            g[np.arange(t.size), np.clip(t, 0, None)] -= 1.0
            g[~valid] = 0.0
            g *= out.grad / n
            logits.accumulate(g.reshape(logits.shape))
        out._backward = back
    return out
