"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from lpsynth.nn.tensor import Tensor


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5,
                      rng: Optional[np.random.Generator] = None,
                      max_coords_per_param: int = 64,
                      zero_tol: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference grads.

    f rebuilds the loss from `params` on every call. Relative error is
    |fd - ad| / max(1e-8, |fd| + |ad|) per coordinate; large tensors are
    spot-checked on a deterministic sample of coordinates.  Coordinates
    where both sides are below `zero_tol` count as exact: a truly zero
    derivative leaves the central difference measuring only the rounding
    noise of the loss, which the relative form would misreport.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        if flat.size <= max_coords_per_param:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f1 = float(f().data)
            flat[c] = orig - eps
            f2 = float(f().data)
            flat[c] = orig
            fd = (f1 - f2) / (2.0 * eps)
            ad = float(grad.reshape(-1)[c])
            if abs(fd) < zero_tol and abs(ad) < zero_tol:
                continue
            rel = abs(fd - ad) / max(1e-8, abs(fd) + abs(ad))
            worst = max(worst, rel)
    return worst
