"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumcoreError, Tensor, backward, get_precision, new_graph, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` rebuilds a scalar loss from ``params`` on every call. The error per
    coordinate is ``|fd - ad| / max(1, |fd|, |ad|)``. With ``max_coords`` only a
    random subset of coordinates per parameter is probed.
    """
    if get_precision() != "f64":
        raise NumcoreError("grad_check requires 64-bit precision")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    new_graph()
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        ad_flat = ad.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss at probe point (coordinate {i})")
            fd = (up - down) / (2 * eps)
            a = float(ad_flat[i])
            err = abs(fd - a) / max(1.0, abs(fd), abs(a))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
