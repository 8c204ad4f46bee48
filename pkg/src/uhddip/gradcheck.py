"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradient magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare backprop against central differences of the scalar ``fn()``.

    ``fn`` must rebuild the graph from ``inputs`` on each call. When
    ``max_coords`` is set, at most that many coordinates of each input are
    probed, chosen at random. Returns the worst relative error over inputs.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            num[k] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(ga.reshape(-1)[idx], num))
    return worst


def directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                      n_dirs: int = 3, seed: int = 0) -> float:
    """Compare <grad, v> with the central difference along random directions v."""
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    fn().backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        originals = [t.data.copy() for t in inputs]
        for t, d, o in zip(inputs, dirs, originals):
            t.data[...] = o + eps * d
        fp = float(fn().data)
        for t, d, o in zip(inputs, dirs, originals):
            t.data[...] = o - eps * d
        fm = float(fn().data)
        for t, o in zip(inputs, originals):
            t.data[...] = o
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst
