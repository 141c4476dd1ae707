"""Finite-difference validation of every backward rule."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of the scalar f() against central
    finite differences at step h.

    Returns the max hybrid relative error over all coordinates,
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-4); the floor
    keeps finite-difference roundoff on near-zero coordinates from
    dominating the ratio.
    """
    for t in wrt:
        t.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value")
    out.backward()
    analytic = [
        (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in wrt
    ]

    worst = 0.0
    for t, ana in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: non-finite perturbed value")
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-4)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
