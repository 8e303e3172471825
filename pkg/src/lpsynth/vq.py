"""Discrete bottleneck: nearest-neighbor quantization against a codebook
that is maintained by exponential moving averages rather than gradients.

The codebook never receives gradient updates.  The autoencoder path uses a
straight-through estimator (forward: quantized row, backward: identity to the
encoder output), the encoder is pulled toward its assigned rows by a
commitment penalty, and the end-to-end path mixes rows softly under predicted
probabilities with the codebook held constant.
"""

from __future__ import annotations

import numpy as np

from lpsynth.nn import Module
from lpsynth.nn import tensor as tz
from lpsynth.nn.tensor import Tensor


class ShapeError(ValueError):
    """An array argument does not have the documented shape."""


class Codebook(Module):
    """K x D embedding table with EMA accumulators.

    Invariant: ``rows == ema_sums / max(ema_counts, eps)`` row-wise after
    every update.  Rows, counts and sums are buffers, not parameters; they
    are serialized with the model but ignored by optimizers.
    """

    def __init__(self, k: int, d: int, rng: np.random.Generator, *,
                 decay: float = 0.99, eps: float = 1e-5, beta: float = 0.25):
        if k < 2:
            raise ValueError(f"codebook needs at least 2 rows, got {k}")
        if d < 1:
            raise ValueError(f"bad embedding width {d}")
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.k = int(k)
        self.d = int(d)
        self.decay = float(decay)
        self.eps = float(eps)
        self.beta = float(beta)
        dtype = tz.default_dtype()
        rows = rng.uniform(-1.0 / k, 1.0 / k, size=(k, d)).astype(dtype)
        self.rows = Tensor(rows)
        self.ema_counts = Tensor(np.ones(k, dtype=dtype))
        self.ema_sums = Tensor(rows.copy())

    # -- lookup ------------------------------------------------------------

    def assign(self, e: np.ndarray) -> np.ndarray:
        """Nearest codebook row per vector: ``(..., D) -> (...)`` int ids.

        Ties break toward the lowest index.
        """
        e = np.asarray(e)
        if e.ndim < 1 or e.shape[-1] != self.d:
            raise ShapeError(f"expected (..., {self.d}), got {e.shape}")
        diff = e[..., None, :] - self.rows.data
        return np.argmin(np.einsum("...kd,...kd->...k", diff, diff), axis=-1)

    def quantize(self, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (ids, rows[ids]); the vectors are exact codebook rows."""
        ids = self.assign(e)
        return ids, self.rows.data[ids]

    def straight_through(self, e: Tensor,
                         ids: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Quantize with a pass-through gradient.

        Forward value is bit-identical to the assigned codebook rows;
        backward passes the incoming gradient to ``e`` unchanged.  The
        codebook itself receives no gradient.  Pass precomputed ``ids`` to
        hold the assignment cells fixed (the map is piecewise constant, so
        finite-difference checks need frozen cells to see the smooth part).
        """
        if ids is None:
            ids = self.assign(e.data)
        out = tz._node(self.rows.data[ids], (e,))
        if out._parents:
            def back():
                e.accumulate(out.grad)
            out._backward = back
        return out, ids

    # -- losses ------------------------------------------------------------

    def commitment_loss(self, e: Tensor,
                        ids: np.ndarray | None = None) -> Tensor:
        """beta * mean over positions of squared distance to assigned rows.

        Gradient flows to ``e`` only; the assigned rows act as constants.
        ``ids`` optionally freezes the assignments (see straight_through).
        """
        if e.data.size == 0:
            raise ShapeError("commitment loss over an empty batch")
        if ids is None:
            ids = self.assign(e.data)
        target = Tensor(self.rows.data[ids])
        diff = e - target
        positions = e.data.size // self.d
        return (diff * diff).sum() * (self.beta / positions)

    def soft_mix(self, probs: Tensor) -> Tensor:
        """Expected row under ``probs``: ``(..., K) @ rows -> (..., D)``.

        Differentiable in the probabilities; the codebook is held constant.
        A one-hot row reproduces the corresponding codebook row exactly.
        """
        if probs.data.ndim < 1 or probs.data.shape[-1] != self.k:
            raise ShapeError(f"expected (..., {self.k}), got {probs.data.shape}")
        return probs @ Tensor(self.rows.data)

    # -- training ----------------------------------------------------------

    def ema_update(self, e: np.ndarray, ids: np.ndarray) -> None:
        """Fold a batch of assigned encoder outputs into the moving averages.

        Rows with no assignments this batch keep their value (numerator and
        denominator decay together).  An empty batch is a no-op.
        """
        dtype = self.rows.data.dtype
        e = np.asarray(e, dtype=dtype).reshape(-1, self.d)
        ids = np.asarray(ids).reshape(-1)
        if e.shape[0] != ids.shape[0]:
            raise ShapeError(f"{e.shape[0]} vectors vs {ids.shape[0]} ids")
        if e.shape[0] == 0:
            return
        g = self.decay
        counts = np.bincount(ids, minlength=self.k).astype(dtype)
        sums = np.zeros_like(self.ema_sums.data)
        np.add.at(sums, ids, e)
        self.ema_counts.data = g * self.ema_counts.data + (1.0 - g) * counts
        self.ema_sums.data = g * self.ema_sums.data + (1.0 - g) * sums
        self.rows.data = self.ema_sums.data / np.maximum(
            self.ema_counts.data, self.eps)[:, None]
