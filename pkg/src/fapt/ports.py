"""Moving-port selection and the port/table quality metrics."""

from dataclasses import dataclass

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class MetricDomainError(ValueError):
    pass


#: returned by :func:`validation_nmse` when the selected channel matches exactly
NEG_INF_DB = float("-inf")


@dataclass(frozen=True)
class PortIndex:
    n: int
    m: int
    flat: int


def flat_to_port(p: int, n_rows: int, n_cols: int) -> PortIndex:
    if not 0 <= p < n_rows * n_cols:
        raise IndexError(f"flat port index {p} outside 0..{n_rows * n_cols - 1}")
    n, m = divmod(int(p), n_cols)
    return PortIndex(n + 1, m + 1, int(p))


def port_to_flat(n: int, m: int, n_cols: int) -> int:
    return (n - 1) * n_cols + (m - 1)


def _as_stack(x):
    x = np.asarray(x, dtype=np.complex128)
    return x[None] if x.ndim == 2 else x


def select_port_miso(pred_stack, ref_stack) -> PortIndex:
    """Port minimising ``sum_i |pred_i - ref_i|`` over the BS elements ``i``.

    Accepts ``(N_t, N, M)`` stacks (or single ``(N, M)`` tables). Ties go to
    the lowest row-major flat index.
    """
    pred = _as_stack(pred_stack)
    ref = _as_stack(ref_stack)
    if pred.shape != ref.shape or pred.ndim != 3:
        raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    flat = int(kernels.port_argmin(pred, ref))
    return flat_to_port(flat, pred.shape[1], pred.shape[2])


def select_port_single(pred_table, ref_table) -> PortIndex:
    pred = np.asarray(pred_table)
    ref = np.asarray(ref_table)
    if pred.shape != ref.shape or pred.ndim != 2:
        raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    return select_port_miso(pred[None], ref[None])


def select_ports(pred, ref) -> np.ndarray:
    """Batched selection: ``(..., N_t, N, M)`` inputs -> ``(...)`` flat indices."""
    pred = np.asarray(pred, dtype=np.complex128)
    ref = np.asarray(ref, dtype=np.complex128)
    if pred.shape != ref.shape:
        raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    return np.asarray(kernels.port_argmin(pred, ref))


def brute_force_port_oracle(pred_stack, ref_stack) -> PortIndex:
    """Plain double loop over all ports; reference answer for the selectors."""
    pred = _as_stack(pred_stack)
    ref = _as_stack(ref_stack)
    if pred.shape != ref.shape or pred.ndim != 3:
        raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    n_ant, n_rows, n_cols = pred.shape
    best = None
    best_flat = 0
    for n in range(n_rows):
        for m in range(n_cols):
            total = 0.0
            for i in range(n_ant):
                total += abs(complex(pred[i, n, m]) - complex(ref[i, n, m]))
            if best is None or total < best:
                best = total
                best_flat = n * n_cols + m
    return flat_to_port(best_flat, n_rows, n_cols)


def validation_nmse(h, h_ref) -> float:
    """``10 log10(||h - h_ref||^2 / ||h_ref||^2)`` in dB; -inf on an exact match."""
    h = np.asarray(h, dtype=np.complex128).ravel()
    h_ref = np.asarray(h_ref, dtype=np.complex128).ravel()
    if h.shape != h_ref.shape:
        raise DimensionError(f"length mismatch: {h.shape} vs {h_ref.shape}")
    ref_energy = float(np.sum(np.abs(h_ref) ** 2))
    if ref_energy == 0.0:
        raise MetricDomainError("reference channel has zero norm")
    err = float(np.sum(np.abs(h - h_ref) ** 2))
    if err == 0.0:
        return NEG_INF_DB
    return 10.0 * np.log10(err / ref_energy)


def table_accuracy(pred, truth) -> float:
    """Relative-L1 table accuracy in percent, clamped to [0, 100]."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mass = float(np.sum(np.abs(truth)))
    if mass == 0.0:
        raise MetricDomainError("truth tables have zero total magnitude")
    acc = (1.0 - float(np.sum(np.abs(pred - truth))) / mass) * 100.0
    return min(100.0, max(0.0, acc))


def gather_port_channels(tables, flat_ports) -> np.ndarray:
    """Pick ``tables[..., n, m]`` at flat indices; ``tables`` is ``(..., N, M)``."""
    tables = np.asarray(tables)
    flat = tables.reshape(tables.shape[:-2] + (-1,))
    idx = np.asarray(flat_ports)[..., None]
    return np.take_along_axis(flat, idx, axis=-1)[..., 0]
