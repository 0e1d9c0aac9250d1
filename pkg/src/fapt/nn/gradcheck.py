"""Central finite-difference verification of analytic gradients."""

from typing import Callable, Sequence

import numpy as np

from .core import NumericError


def finite_diff_check(loss_fn: Callable[[], float], arrays: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], epsilon: float = 1e-3,
                      max_coords: int = 30, seed: int = 0, rel_floor: float = 1e-5) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    The derivative estimate is the fourth-order five-point stencil, which keeps
    truncation error near ``epsilon**4`` so a fairly large step can be used and
    round-off stays small. Each coordinate is probed at ``epsilon``,
    ``epsilon / 100`` and ``epsilon / 10**4`` and the closest estimate is kept:
    a piecewise-linear activation whose kink falls inside a wide stencil spoils
    that estimate but not the narrower ones, while a wrong analytic gradient
    disagrees with all of them.

    ``loss_fn`` must read the current contents of ``arrays``, which are perturbed
    in place and restored. At most ``max_coords`` coordinates are sampled per
    array. The error of one coordinate is ``|g - n| / max(|g|, |n|, floor)`` where
    ``floor = rel_floor * max|grads|``, so coordinates whose gradient is
    negligible next to the largest one are judged against that scale.
    """
    for a in arrays:
        if a.dtype != np.float64:
            raise TypeError("finite-difference checks require float64 arrays")
    scale = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    floor = max(rel_floor * scale, 1e-300)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        if flat.size == 0:
            continue
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            analytic = float(gflat[c])
            best = np.inf
            for h in (epsilon, 1e-2 * epsilon, 1e-4 * epsilon):
                vals = []
                for step in (2.0, 1.0, -1.0, -2.0):
                    flat[c] = orig + step * h
                    vals.append(float(loss_fn()))
                flat[c] = orig
                if not np.all(np.isfinite(vals)):
                    raise NumericError(f"non-finite loss while probing coordinate {c}")
                f2, f1, m1, m2 = vals
                numeric = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h)
                denom = max(abs(analytic), abs(numeric), floor)
                best = min(best, abs(analytic - numeric) / denom)
            worst = max(worst, best)
    return worst
