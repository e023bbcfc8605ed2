"""Finite-difference verification of reverse-mode gradients.

``finite_diff_check`` compares the autodiff gradient of a scalar-valued
function against central differences, coordinate by coordinate, in float64.
The relative error uses ``|a - n| / max(1, |a|, |n|)`` so values near zero do
not blow up the ratio.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError
from .rng import Rng
from .tensor import Tensor, no_grad


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must be a pure scalar-valued function of ``x``; it is re-evaluated
    ``2n`` times for ``n`` checked coordinates.  When ``max_coords`` is given,
    a random subset of coordinates is checked (useful for large leaves).
    """
    base = np.asarray(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.reshape(-1)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    coords = np.arange(base.size)
    if max_coords is not None and base.size > max_coords:
        gen = rng if rng is not None else Rng(0, 0)
        coords = gen.permutation(base.size)[:max_coords]

    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(base.copy())).item()
            flat[i] = orig - h
            down = f(Tensor(base.copy())).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return float(worst)


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold
