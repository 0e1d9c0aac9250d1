"""Randomised propagation scenarios and (past, future, reference) channel samples."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from ._backend import worker_count
from .geometry import (SPEED_OF_LIGHT, ArrayGeometry, Path, PathSet, PortGrid,
                       canonical_angles, channel_tables)

KMH = 1.0 / 3.6

# [phi_AOD, theta_EOD, phi_AOA, theta_EOA] in degrees, one row per UE
DEFAULT_ANGLE_TUPLES = (
    (31.0, 149.0, 150.0, 30.0),
    (-38.0, 218.0, 227.0, -47.0),
    (1.0, 179.0, 99.0, 81.0),
    (10.0, 170.0, 36.0, 144.0),
    (149.0, 31.0, 53.0, 127.0),
    (129.0, 51.0, 71.0, 109.0),
    (-15.0, 195.0, 210.0, -30.0),
    (199.0, -19.0, 212.0, -32.0),
    (-43.0, 223.0, 76.0, 104.0),
    (7.0, 173.0, 23.0, 157.0),
)

# independent RNG stream tags
_STREAM_PATHS = 1
_STREAM_SAMPLE = 2
_STREAM_SPLIT = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    carrier_freq: float = 39e9
    grid: PortGrid = field(default_factory=PortGrid)
    geom: ArrayGeometry = field(default_factory=ArrayGeometry)
    n_paths: int = 37
    ricean_k: float = 10.0
    rms_delay_spread: float = 616e-9
    # one OFDM symbol (1 ms / 14): at 1 ms the 39 GHz Doppler phase wraps several times per snapshot
    slot_duration: float = 1e-3 / 14
    group_len: int = 50
    sampling_slot: int = 7
    speed_range: Tuple[float, float] = (90.0 * KMH, 150.0 * KMH)
    angle_tuples: Tuple[Tuple[float, float, float, float], ...] = DEFAULT_ANGLE_TUPLES
    cluster_spread_deg: float = 5.0
    seed: int = 0
    t_in: int = 8
    f_out: int = 8
    csi_delay_slots: int = 4
    freq_offset: float = 0.0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not self.rms_delay_spread > 0:
            raise ConfigError("rms_delay_spread must be positive")
        if not 1 <= self.sampling_slot <= self.group_len:
            raise ConfigError("sampling_slot must lie in 1..group_len")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid speed range {self.speed_range}")
        if self.t_in < 1 or self.f_out < 1:
            raise ConfigError("t_in and f_out must be >= 1")
        if self.csi_delay_slots < 0:
            raise ConfigError("csi_delay_slots must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def n_ue(self) -> int:
        return len(self.angle_tuples)

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    @classmethod
    def full_scale(cls, **kw) -> "ScenarioConfig":
        """Full-size setting: 100 x 50 port table."""
        base = dict(grid=PortGrid(n_ports_z=100, n_ports_y=50, w_y=10.0, w_z=20.0))
        base.update(kw)
        return cls(**base)


@dataclass
class SampleRecord:
    past: np.ndarray
    future: np.ndarray
    reference: np.ndarray
    ue_id: int = 0
    speed: float = 0.0
    t0_slot: int = 0
    seed: int = 0


@dataclass
class ChannelDataset:
    """Stacked samples; tensor arrays are ``(S, T|F, N, M)`` complex64."""

    past: np.ndarray
    future: np.ndarray
    reference: np.ndarray
    ue_id: np.ndarray
    speed: np.ndarray
    t0_slot: np.ndarray
    seed: np.ndarray

    def __len__(self):
        return self.past.shape[0]

    @property
    def dims(self):
        """``(T, F, N, M)``."""
        return (self.past.shape[1], self.future.shape[1], self.past.shape[2], self.past.shape[3])

    def __getitem__(self, i) -> SampleRecord:
        return SampleRecord(self.past[i], self.future[i], self.reference[i], int(self.ue_id[i]),
                            float(self.speed[i]), int(self.t0_slot[i]), int(self.seed[i]))

    def subset(self, idx) -> "ChannelDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ChannelDataset(*(getattr(self, f.name)[idx] for f in fields(self)))

    @classmethod
    def empty(cls, t_in, f_out, n, m) -> "ChannelDataset":
        c = np.complex64
        return cls(np.zeros((0, t_in, n, m), c), np.zeros((0, f_out, n, m), c),
                   np.zeros((0, f_out, n, m), c), np.zeros(0, np.uint32), np.zeros(0, np.float64),
                   np.zeros(0, np.uint32), np.zeros(0, np.uint64))

    @classmethod
    def from_records(cls, records: List[SampleRecord], dims=None) -> "ChannelDataset":
        if not records:
            if dims is None:
                raise ValueError("dims required for an empty dataset")
            return cls.empty(*dims)
        return cls(
            np.stack([r.past for r in records]).astype(np.complex64),
            np.stack([r.future for r in records]).astype(np.complex64),
            np.stack([r.reference for r in records]).astype(np.complex64),
            np.array([r.ue_id for r in records], dtype=np.uint32),
            np.array([r.speed for r in records], dtype=np.float64),
            np.array([r.t0_slot for r in records], dtype=np.uint32),
            np.array([r.seed for r in records], dtype=np.uint64),
        )


@dataclass
class NormStats:
    mu: complex
    sigma: float


def _rng(cfg_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=cfg_seed, spawn_key=key))


def sample_path_set(cfg: ScenarioConfig, ue_index: int, rng_state=None) -> PathSet:
    """Draw the path set of UE ``ue_index``.

    The LoS path sits exactly at the UE's central angles with zero delay; the
    NLoS paths scatter around those centres with ``cluster_spread_deg`` Gaussian
    jitter and exponential delays. Powers decay as ``exp(-tau / spread)`` and
    are normalised to unit total power. Without ``rng_state`` the stream is
    derived from ``(cfg.seed, ue_index)``.
    """
    if not cfg.angle_tuples:
        raise ConfigError("angle_tuples is empty")
    if not 0 <= ue_index < len(cfg.angle_tuples):
        raise ConfigError(f"ue_index {ue_index} outside 0..{len(cfg.angle_tuples) - 1}")
    rng = rng_state if rng_state is not None else _rng(cfg.seed, _STREAM_PATHS, ue_index)
    phi_aod, theta_eod, phi_aoa, theta_eoa = np.deg2rad(np.asarray(cfg.angle_tuples[ue_index], float))

    n_nlos = cfg.n_paths - 1
    taus = np.sort(rng.exponential(cfg.rms_delay_spread, size=n_nlos))
    jitter = np.deg2rad(cfg.cluster_spread_deg) * rng.standard_normal((n_nlos, 4))
    heading = rng.uniform(-np.pi, np.pi)

    delays = np.concatenate([[0.0], taus])
    power = np.exp(-delays / cfg.rms_delay_spread)
    beta = np.sqrt(power / power.sum())

    paths = []
    for p in range(cfg.n_paths):
        d = jitter[p - 1] if p else np.zeros(4)
        th_d, ph_d = canonical_angles(theta_eod + d[1], phi_aod + d[0])
        th_a, ph_a = canonical_angles(theta_eoa + d[3], phi_aoa + d[2])
        paths.append(Path(th_d, ph_d, th_a, ph_a, float(delays[p]), float(beta[p]), is_los=(p == 0)))
    direction = np.array([np.cos(heading), np.sin(heading), 0.0])
    return PathSet(paths, cfg.ricean_k, cfg.wavelength, cfg.freq_offset, direction)


def sample_slots(cfg: ScenarioConfig, t0: int):
    """Slot indices of the past window and of the predicted horizon for sampling slot ``t0``."""
    past = t0 - cfg.t_in + 1 + np.arange(cfg.t_in)
    future = t0 + cfg.csi_delay_slots + 1 + np.arange(cfg.f_out)
    return past, future


def generate_tables(cfg: ScenarioConfig, ps: PathSet, t0: int, speed: float,
                    geom: Optional[ArrayGeometry] = None):
    """Raw multi-antenna tables ``(past (T,Nt,N,M), future (F,Nt,N,M), h_ref (Nt,))``."""
    geom = geom if geom is not None else cfg.geom
    moving = ps.with_velocity(speed * np.asarray(ps.ue_direction))
    past_slots, future_slots = sample_slots(cfg, t0)
    slots = np.concatenate([past_slots, future_slots])
    tables = channel_tables(slots * cfg.slot_duration, moving, geom, cfg.grid)
    past = tables[:cfg.t_in]
    future = tables[cfg.t_in:]
    h_ref = past[-1, :, 0, 0].copy()
    return past, future, h_ref


def generate_sample(cfg: ScenarioConfig, ps: PathSet, t0: int, speed: float,
                    ue_id: int = 0, seed: int = 0) -> SampleRecord:
    """One SISO sample (BS element 1) with the reference taken at slot ``t0``."""
    past, future, h_ref = generate_tables(cfg, ps, t0, speed)
    reference = np.broadcast_to(h_ref[0], future[:, 0].shape).copy()
    return SampleRecord(past[:, 0], future[:, 0], reference, ue_id, float(speed), int(t0), int(seed))


def _sample_seed(cfg: ScenarioConfig, index: int) -> int:
    return int(_rng(cfg.seed, _STREAM_SAMPLE, index).integers(0, 2**63))


def _draw_sample(cfg: ScenarioConfig, path_sets, index: int) -> SampleRecord:
    ue = index % cfg.n_ue
    group = index // cfg.n_ue
    seed = _sample_seed(cfg, index)
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(1, cfg.group_len + 1))
    lo, hi = cfg.speed_range
    speed = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    # keep every slot index non-negative
    t0 = cfg.t_in + group * cfg.group_len + offset
    rec = generate_sample(cfg, path_sets[ue], t0, speed, ue_id=ue, seed=seed)
    rec.past = rec.past.astype(np.complex64)
    rec.future = rec.future.astype(np.complex64)
    rec.reference = rec.reference.astype(np.complex64)
    return rec


def generate_samples(cfg: ScenarioConfig, n_samples: int, start: int = 0) -> ChannelDataset:
    """Samples ``start .. start + n_samples - 1``, round-robin over UEs.

    Each sample owns a random substream keyed on ``(cfg.seed, index)`` so the
    result does not depend on ``FAPT_THREADS`` or evaluation order.
    """
    path_sets = [sample_path_set(cfg, u) for u in range(cfg.n_ue)]
    indices = range(start, start + n_samples)
    workers = min(worker_count(), max(1, n_samples))
    if workers == 1:
        records = [_draw_sample(cfg, path_sets, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda i: _draw_sample(cfg, path_sets, i), indices))
    n, m = cfg.grid.shape
    return ChannelDataset.from_records(records, dims=(cfg.t_in, cfg.f_out, n, m))


def split_sizes(n_samples: int, split_fraction: float):
    n_train = int(np.floor(n_samples * split_fraction))
    n_train = min(max(n_train, 1), n_samples - 1)
    return n_train, n_samples - n_train


def build_dataset(cfg: ScenarioConfig, n_samples: int = 2000, split_fraction: float = 0.75):
    """Generate ``n_samples`` samples and split them into (train, test)."""
    if n_samples < 2:
        raise ConfigError("need at least 2 samples to form a train/test split")
    if not 0 < split_fraction < 1:
        raise ConfigError("split_fraction must lie strictly between 0 and 1")
    return split_dataset(generate_samples(cfg, n_samples), split_fraction, cfg.seed)


def split_dataset(data: ChannelDataset, split_fraction: float, seed: int):
    """Deterministic (train, test) partition keyed on ``seed``; order within each part is kept."""
    n = len(data)
    if n < 2:
        raise ConfigError("need at least 2 samples to form a train/test split")
    n_train, _ = split_sizes(n, split_fraction)
    perm = _rng(seed, _STREAM_SPLIT).permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


SIGMA_FLOOR = 1e-12


def normalize(x: np.ndarray):
    """Per-sample mean/std normalisation of a complex tensor.

    ``mu`` is the complex mean; ``sigma`` is the standard deviation of the
    centred real and imaginary components pooled together.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot normalise an empty tensor")
    mu = complex(x.mean())
    centred = x - mu
    sigma = float(np.sqrt(0.5 * np.mean(centred.real**2 + centred.imag**2)))
    sigma = max(sigma, SIGMA_FLOOR)
    return centred / sigma, NormStats(mu, sigma)


def denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.sigma * np.asarray(y) + stats.mu
