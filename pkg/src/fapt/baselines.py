"""Classical predictors: vectorised Prony extrapolation and hold-last.

Every predictor here follows one plug-in contract::

    predictor(history, steps, offset=0) -> tables

with ``history`` shaped ``(B, T, N, M)`` and the result ``(B, steps, N, M)``.
``offset`` is the number of unobserved slots between the last history table
and the first predicted one (the CSI delay gap).
"""

from dataclasses import dataclass
from typing import Protocol

import numpy as np

TIKHONOV = 1e-10
REFINE_STEPS = 3


class DegenerateHistoryError(ValueError):
    pass


class Predictor(Protocol):
    def __call__(self, history: np.ndarray, steps: int, offset: int = 0) -> np.ndarray:
        ...


@dataclass(frozen=True)
class PronyModel:
    order: int
    coeffs: np.ndarray


def vec_prony_fit(history, order: int = 2) -> PronyModel:
    """Least-squares coefficients of ``x_n = sum_l a_l x_{n-l}`` shared by all components.

    ``history`` is ``(T, D)``: ``T`` snapshots of a ``D``-vector. Sliding
    windows of every component are stacked into one overdetermined system,
    solved with Tikhonov damping ``TIKHONOV * mean(diag(A^H A))`` followed by
    ``REFINE_STEPS`` passes of iterated Tikhonov refinement.
    """
    x = np.asarray(history, dtype=np.complex128)
    if x.ndim == 1:
        x = x[:, None]
    if order < 1:
        raise ValueError("order must be >= 1")
    t = x.shape[0]
    if t < 2 * order:
        raise ValueError(f"need at least {2 * order} snapshots for order {order}, got {t}")
    if not np.all(np.isfinite(x)):
        raise DegenerateHistoryError("history contains non-finite values")
    # column l holds x_{n-l-1} for n = order .. t-1, all components stacked
    a = np.stack([x[order - l - 1:t - l - 1].ravel() for l in range(order)], axis=1)
    b = x[order:].ravel()
    scale = float(np.mean(np.sum(np.abs(a) ** 2, axis=0)))
    if scale == 0.0:
        raise DegenerateHistoryError("history has zero energy on the fit window")
    # damped least squares as an augmented system, avoiding squared conditioning;
    # a few refinement passes on the residual remove the damping bias along
    # well-determined directions while null directions stay damped
    damp = np.sqrt(TIKHONOV * scale) * np.eye(order)
    aug_a = np.vstack([a, damp])
    zeros = np.zeros(order, dtype=np.complex128)
    coeffs = np.zeros(order, dtype=np.complex128)
    for _ in range(REFINE_STEPS + 1):
        step, *_ = np.linalg.lstsq(aug_a, np.concatenate([b - a @ coeffs, zeros]), rcond=None)
        coeffs = coeffs + step
    return PronyModel(order, coeffs)


def vec_prony_predict(model: PronyModel, history, steps: int, offset: int = 0) -> np.ndarray:
    """Run the recurrence ``offset + steps`` slots past ``history``; return the last ``steps``."""
    x = np.asarray(history, dtype=np.complex128)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    L = model.order
    buf = list(x[-L:])
    out = []
    for _ in range(offset + steps):
        nxt = sum(model.coeffs[l] * buf[-1 - l] for l in range(L))
        buf.append(nxt)
        out.append(nxt)
    res = np.array(out[offset:]).reshape(steps, x.shape[1])
    return res[:, 0] if squeeze else res


def hold_last_predict(history, steps: int, offset: int = 0) -> np.ndarray:
    """Repeat the last table ``steps`` times; works on ``(T, ...)`` or batched ``(B, T, ...)`` via the caller."""
    h = np.asarray(history)
    if h.shape[0] < 1:
        raise ValueError("history must hold at least one table")
    return np.repeat(h[-1:], steps, axis=0)


class HoldLast:
    name = "hold-last"

    def __call__(self, history, steps: int, offset: int = 0) -> np.ndarray:
        h = np.asarray(history)
        return np.repeat(h[:, -1:], steps, axis=1)


class VecProny:
    """Per-sample Vec Prony on vectorised tables."""

    name = "vec-prony"

    def __init__(self, order: int = 2, offset: int = 0):
        self.order = order
        self.offset = offset

    def __call__(self, history, steps: int, offset=None) -> np.ndarray:
        gap = self.offset if offset is None else offset
        h = np.asarray(history, dtype=np.complex128)
        b, t = h.shape[:2]
        tail = h.shape[2:]
        out = np.empty((b, steps) + tail, dtype=np.complex128)
        for i in range(b):
            flat = h[i].reshape(t, -1)
            try:
                model = vec_prony_fit(flat, self.order)
            except DegenerateHistoryError:
                out[i] = h[i, -1]
                continue
            out[i] = vec_prony_predict(model, flat, steps, gap).reshape((steps,) + tail)
        return out
