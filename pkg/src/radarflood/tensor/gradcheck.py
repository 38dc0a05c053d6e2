"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad


def grad_check(
    f: Callable[[dict], Tensor],
    params: dict,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``f`` with central differences.

    Args:
        f: maps a dict of Tensors to a scalar Tensor.
        params: name -> array (or Tensor) of float64 values, not modified.
        eps: perturbation size.
        max_coords: if set, check at most this many randomly chosen entries
            per parameter instead of all of them.

    Returns:
        ``max |analytic - numeric| / max(1, |analytic| + |numeric|)``.
    """
    base = {k: np.array(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    f(leaves).backward()
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, value.shape)
            probe = {k: Tensor(v) for k, v in base.items()}
            bumped = value.copy()
            with no_grad():
                bumped[idx] = value[idx] + eps
                probe[name] = Tensor(bumped)
                up = f(probe).item()
                bumped[idx] = value[idx] - eps
                probe[name] = Tensor(bumped)
                down = f(probe).item()
            numeric = (up - down) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
