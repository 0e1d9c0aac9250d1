"""Multi-user MISO downlink evaluation with zero-forcing precoding.

Each UE tracks its own fluid-antenna port. The BS precodes with the reference
channels ``H_ref`` (port (1,1) at the sampling slot), which the port choice
tries to keep valid over the horizon. Per condition the *true* channel row of
a UE at horizon step ``f`` is:

* ``stationary``: the reference channel itself (no motion),
* a predictor name: the true channel at the port chosen on that predictor's tables,
* ``no-prediction``: the true channel at port (1,1), i.e. the antenna never moves.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .geometry import ArrayGeometry
from .ports import DimensionError, gather_port_channels, select_ports, validation_nmse
from .scenario import ScenarioConfig, _rng, generate_tables, sample_path_set
from .training import write_csv_rows

STATIONARY = "stationary"
NO_PREDICTION = "no-prediction"
SE_FIELDS = ("snr_db", "condition", "se_bps_hz", "n_trials", "stderr")
NMSE_FIELDS = ("model", "speed_kmh", "bs_array", "step", "nmse_v_db")
_STREAM_TRIAL = 23


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


def ezf_precoder(h_rows, cond_limit: float = 1e12) -> np.ndarray:
    """``W = H^H (H H^H)^{-1}`` with unit-norm columns scaled to power ``1/N_UE`` each."""
    h = np.asarray(h_rows, dtype=np.complex128)
    if h.ndim != 2:
        raise DimensionError(f"expected (N_UE, N_t) channel rows, got {h.shape}")
    n_ue, n_t = h.shape
    if n_ue > n_t:
        raise RankDeficiencyError(f"{n_ue} users exceed {n_t} BS antennas")
    gram = h @ h.conj().T
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > cond_limit:
        raise RankDeficiencyError("channel rows are (numerically) linearly dependent")
    w = h.conj().T @ np.linalg.inv(gram)
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    return w * np.sqrt(1.0 / n_ue)


def sinr_and_se(h_true, w, snr_db: float):
    """Per-user SINR and sum spectral efficiency (bps/Hz) with unit noise power."""
    h = np.asarray(h_true, dtype=np.complex128)
    w = np.asarray(w, dtype=np.complex128)
    if h.shape[1] != w.shape[0] or h.shape[0] != w.shape[1]:
        raise DimensionError(f"channel {h.shape} and precoder {w.shape} disagree")
    rho = 10.0 ** (snr_db / 10.0)
    gains = np.abs(h @ w) ** 2
    signal = np.diag(gains)
    interference = gains.sum(axis=1) - signal
    sinr = rho * signal / (rho * interference + 1.0)
    return sinr, float(np.sum(np.log2(1.0 + sinr)))


@dataclass
class MisoScenario:
    cfg: ScenarioConfig
    geom: ArrayGeometry = field(default_factory=lambda: ArrayGeometry(2, 8))
    speed_mps: float = 120.0 / 3.6
    snr_grid: Sequence[float] = (0.0, 10.0, 20.0, 30.0)
    n_trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.cfg.n_ue > self.geom.n_t:
            raise ValueError(f"{self.cfg.n_ue} UEs exceed {self.geom.n_t} BS antennas")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")


@dataclass
class SERow:
    snr_db: float
    condition: str
    se_bps_hz: float
    n_trials: int
    stderr: float


@dataclass
class SEReport:
    rows: List[SERow]
    nmse_curves: Dict[str, np.ndarray]

    def se(self, condition: str) -> np.ndarray:
        return np.array([r.se_bps_hz for r in self.rows if r.condition == condition])

    def conditions(self) -> List[str]:
        return list(dict.fromkeys(r.condition for r in self.rows))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_csv_rows(fh, SE_FIELDS, ([getattr(r, k) for k in SE_FIELDS] for r in self.rows))


def _trial_channels(sc: MisoScenario, path_sets, trial: int):
    cfg = sc.cfg
    rng = _rng(cfg.seed, _STREAM_TRIAL, sc.seed, trial)
    pasts, futures, refs = [], [], []
    for ps in path_sets:
        offset = int(rng.integers(1, cfg.group_len + 1))
        t0 = cfg.t_in + trial * cfg.group_len + offset
        past, future, h_ref = generate_tables(cfg, ps, t0, sc.speed_mps, sc.geom)
        pasts.append(past)
        futures.append(future)
        refs.append(h_ref)
    return np.stack(pasts), np.stack(futures), np.stack(refs)


def _predict_stack(predictor, past, f_out, offset):
    """Apply a SISO predictor per BS antenna: ``(U, T, Nt, N, M)`` -> ``(U, F, Nt, N, M)``."""
    u, t, nt, n, m = past.shape
    flat = past.transpose(0, 2, 1, 3, 4).reshape(u * nt, t, n, m)
    pred = np.asarray(predictor(flat, f_out, offset))
    return pred.reshape(u, nt, f_out, n, m).transpose(0, 2, 1, 3, 4)


def run_benchmark(sc: MisoScenario, predictors: Dict[str, object]) -> SEReport:
    """Monte-Carlo SE per (SNR, condition) plus per-horizon NMSE_v per predictor.

    SE is averaged over the horizon steps of each trial, then over trials.
    ``nmse_curves`` also holds the ``no-prediction`` curve.
    """
    cfg = sc.cfg
    f_out = cfg.f_out
    path_sets = [sample_path_set(cfg, u) for u in range(cfg.n_ue)]
    names = [STATIONARY] + list(predictors) + [NO_PREDICTION]
    snrs = list(sc.snr_grid)
    se = np.zeros((len(names), len(snrs), sc.n_trials))
    got_all = {name: [] for name in list(predictors) + [NO_PREDICTION]}
    ref_all = []
    for trial in range(sc.n_trials):
        past, future, h_ref = _trial_channels(sc, path_sets, trial)
        w = ezf_precoder(h_ref)
        truths = {STATIONARY: np.broadcast_to(h_ref, (f_out,) + h_ref.shape)}
        for name, pred_fn in predictors.items():
            pred = _predict_stack(pred_fn, past, f_out, cfg.csi_delay_slots)
            ref_tables = np.broadcast_to(h_ref[:, None, :, None, None], pred.shape)
            ports = select_ports(pred, ref_tables)                        # (U, F)
            rows = gather_port_channels(future, ports[:, :, None])         # (U, F, Nt)
            truths[name] = rows.transpose(1, 0, 2)
        truths[NO_PREDICTION] = future[:, :, :, 0, 0].transpose(1, 0, 2)
        for name in got_all:
            got_all[name].append(truths[name])
        ref_all.append(np.broadcast_to(h_ref, (f_out,) + h_ref.shape))
        for ci, name in enumerate(names):
            for si, snr in enumerate(snrs):
                se[ci, si, trial] = np.mean([sinr_and_se(truths[name][f], w, snr)[1]
                                             for f in range(f_out)])
    rows = []
    for si, snr in enumerate(snrs):
        for ci, name in enumerate(names):
            vals = se[ci, si]
            err = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            rows.append(SERow(float(snr), name, float(vals.mean()), sc.n_trials, err))
    refs = np.stack(ref_all)                                               # (trials, F, U, Nt)
    curves = {}
    for name, got in got_all.items():
        g = np.stack(got)
        curves[name] = np.array([validation_nmse(g[:, f], refs[:, f]) for f in range(f_out)])
    return SEReport(rows, curves)


def write_nmse_csv(path, rows) -> None:
    """Rows of ``(model, speed_kmh, bs_array, step, nmse_v_db)``."""
    with open(path, "w", newline="") as fh:
        write_csv_rows(fh, NMSE_FIELDS, rows)
