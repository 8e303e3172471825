"""Transformer building blocks on top of the autodiff core."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from lpsynth.nn import tensor as T
from lpsynth.nn.tensor import Tensor


class Module:
    """Parameter container; parameters() walks attributes recursively."""

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        seen: set[int] = set()

        def walk(obj):
            if isinstance(obj, Tensor):
                if obj.requires_grad and id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    walk(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    walk(v)
            elif isinstance(obj, dict):
                for v in obj.values():
                    walk(v)

        walk(self)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def named_parameters(self) -> dict[str, Tensor]:
        """Stable dotted names for checkpointing.

        Unlike parameters(), this includes non-trainable buffers (e.g. EMA
        state), since they are part of the persistent model state.
        """
        out: dict[str, Tensor] = {}

        def walk(obj, prefix):
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, Module):
                for k, v in vars(obj).items():
                    walk(v, f"{prefix}.{k}" if prefix else k)
            elif isinstance(obj, (list, tuple)):
                for i, v in enumerate(obj):
                    walk(v, f"{prefix}.{i}")
            elif isinstance(obj, dict):
                for k, v in obj.items():
                    walk(v, f"{prefix}.{k}")

        walk(self, "")
        return out


def _param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    data = rng.uniform(-scale, scale, size=shape)
    return Tensor(data.astype(T.default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        scale = math.sqrt(6.0 / (d_in + d_out))
        self.w = _param(rng, (d_in, d_out), scale)
        self.b = Tensor(np.zeros(d_out, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d, dtype=T.default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.table = _param(rng, (n, d), 1.0 / math.sqrt(d))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """The fixed position table: sin on even channels, cos on odd."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((length, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d - d // 2])
    return table.astype(T.default_dtype())


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention(Module):
    """Shared projection block for self- and cross-attention.

    Inputs are (B, Lq, D) queries and (B, Lk, D) keys/values; `keep` is a
    boolean mask broadcastable to (B, 1, Lq, Lk). Heads split D evenly.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly across heads")
        self.n_heads = n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        h = self.n_heads
        return x.reshape(B, L, h, D // h).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, kv: Tensor,
                 keep: Optional[np.ndarray] = None) -> Tensor:
        B, Lq, D = q.shape
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(kv))
        vh = self._split(self.wv(kv))
        out = T.attention(qh, kh, vh, keep)
        out = out.transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(d_model, hidden, rng)
        self.down = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).relu())


class TransformerLayer(Module):
    """Pre-norm residual block: self-attention, optional cross, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, hidden: int,
                 rng: np.random.Generator, cross: bool = False):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln_cross = LayerNorm(d_model) if cross else None
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng) if cross else None
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, hidden, rng)

    def __call__(self, x: Tensor, self_keep: Optional[np.ndarray] = None,
                 memory: Optional[Tensor] = None,
                 memory_keep: Optional[np.ndarray] = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, self_keep)
        if self.cross_attn is not None and memory is not None:
            x = x + self.cross_attn(self.ln_cross(x), memory, memory_keep)
        x = x + self.ffn(self.ln2(x))
        return x


class Conv1dHalf(Module):
    """Kernel-3, stride-2, pad-1 convolution: length L → ceil(L/2)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        scale = math.sqrt(6.0 / (3 * d_in + d_out))
        self.w = _param(rng, (3, d_in, d_out), scale)
        self.b = Tensor(np.zeros(d_out, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d_half(x, self.w, self.b)
