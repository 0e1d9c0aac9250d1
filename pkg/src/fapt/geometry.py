"""Array/port geometry and multipath channel synthesis.

Conventions
-----------
* BS element ``k`` (1-based) decodes as ``k - 1 = (n_y - 1) * N_z + (n_z - 1)``,
  the ordering of ``a_y kron a_z``.
* FA port ``(n, m)`` is 1-based; ``n`` runs along z (table rows), ``m`` along y
  (table columns).
* Angles are radians, delays seconds, positions meters. Spacings stored on
  :class:`ArrayGeometry` and apertures on :class:`PortGrid` are in wavelengths.
"""

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import kernels

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array in the yOz plane."""

    n_y: int = 1
    n_z: int = 1
    d_ty: float = 0.5
    d_tz: float = 0.5

    def __post_init__(self):
        if self.n_y < 1 or self.n_z < 1:
            raise ValueError(f"array must have at least one element, got {self.n_y}x{self.n_z}")
        if not (self.d_ty > 0 and self.d_tz > 0):
            raise ValueError("element spacings must be positive")

    @property
    def n_t(self) -> int:
        return self.n_y * self.n_z


@dataclass(frozen=True)
class PortGrid:
    """N x M lattice of fluid-antenna ports spanning ``w_y`` x ``w_z`` wavelengths."""

    n_ports_z: int = 20
    n_ports_y: int = 10
    w_y: float = 10.0
    w_z: float = 20.0

    def __post_init__(self):
        if self.n_ports_z < 2 or self.n_ports_y < 2:
            raise ValueError("port grid needs at least 2 ports along each axis")
        if not (self.w_y > 0 and self.w_z > 0):
            raise ValueError("port apertures must be positive")

    @property
    def shape(self):
        return (self.n_ports_z, self.n_ports_y)

    @property
    def rho_y(self) -> float:
        return (self.n_ports_y - 1) / self.w_y

    @property
    def rho_z(self) -> float:
        return (self.n_ports_z - 1) / self.w_z

    def spacing_y(self, lam: float) -> float:
        return self.w_y * lam / (self.n_ports_y - 1)

    def spacing_z(self, lam: float) -> float:
        return self.w_z * lam / (self.n_ports_z - 1)


@dataclass
class Path:
    theta_eod: float
    phi_aod: float
    theta_eoa: float
    phi_aoa: float
    tau: float = 0.0
    beta: float = 1.0
    is_los: bool = False
    doppler_w: float = 0.0


@dataclass
class PathSet:
    """Ordered propagation paths plus the scalars shared by all of them.

    ``ue_direction`` is the unit heading of the UE; the scenario generator scales
    it by the sampled speed to obtain the velocity.
    """

    paths: List[Path]
    ricean_k: float = 10.0
    carrier_lambda: float = SPEED_OF_LIGHT / 39e9
    freq_offset: float = 0.0
    ue_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        if not self.paths:
            raise ValueError("a PathSet needs at least one path")
        if sum(p.is_los for p in self.paths) != 1:
            raise ValueError("exactly one path must be flagged as LoS")
        if not self.ricean_k > 0:
            raise ValueError("Ricean K-factor must be positive")

    def __len__(self):
        return len(self.paths)

    def alphas(self) -> np.ndarray:
        k = self.ricean_k
        los = np.sqrt(k / (k + 1.0))
        nlos = np.sqrt(1.0 / (k + 1.0))
        return np.array([los if p.is_los else nlos for p in self.paths])

    def with_velocity(self, v) -> "PathSet":
        """Copy with every path's Doppler recomputed for velocity ``v`` (m/s)."""
        vel = np.asarray(v, dtype=np.float64)
        paths = [
            Path(p.theta_eod, p.phi_aod, p.theta_eoa, p.phi_aoa, p.tau, p.beta, p.is_los,
                 doppler_shift(p, vel, self.carrier_lambda))
            for p in self.paths
        ]
        return PathSet(paths, self.ricean_k, self.carrier_lambda, self.freq_offset,
                       np.array(self.ue_direction, dtype=np.float64))


# ---------------------------------------------------------------------------
# positions and directions
# ---------------------------------------------------------------------------

def element_indices(k: int, geom: ArrayGeometry):
    """Decode 1-based element index ``k`` into 1-based ``(n_y, n_z)``."""
    if not 1 <= k <= geom.n_t:
        raise IndexError(f"element index {k} outside 1..{geom.n_t}")
    n_y, n_z = divmod(k - 1, geom.n_z)
    return n_y + 1, n_z + 1


def bs_antenna_position(k: int, geom: ArrayGeometry, lam: float) -> np.ndarray:
    n_y, n_z = element_indices(k, geom)
    return np.array([0.0, geom.d_ty * lam * (n_y - 1), geom.d_tz * lam * (n_z - 1)])


def fa_port_position(n: int, m: int, grid: PortGrid, lam: float) -> np.ndarray:
    if not (1 <= n <= grid.n_ports_z and 1 <= m <= grid.n_ports_y):
        raise IndexError(f"port ({n}, {m}) outside the {grid.n_ports_z}x{grid.n_ports_y} grid")
    return np.array([0.0, grid.spacing_y(lam) * (m - 1), grid.spacing_z(lam) * (n - 1)])


def spherical_unit_vector(theta: float, phi: float) -> np.ndarray:
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def canonical_angles(theta: float, phi: float):
    """Map any (theta, phi) to the same direction with theta in [0, pi], phi in (-pi, pi]."""
    x, y, z = spherical_unit_vector(theta, phi)
    th = float(np.arccos(np.clip(z, -1.0, 1.0)))
    ph = float(np.arctan2(y, x))
    if ph <= -np.pi:
        ph += 2.0 * np.pi
    return th, ph


def doppler_shift(path: Path, vel, lam: float) -> float:
    if not lam > 0:
        raise ValueError("wavelength must be positive")
    r_rx = spherical_unit_vector(path.theta_eoa, path.phi_aoa)
    return float(r_rx @ np.asarray(vel, dtype=np.float64)) / lam


def steering_vector(theta_tx: float, phi_tx: float, geom: ArrayGeometry) -> np.ndarray:
    """UPA response ``a_y kron a_z`` (spacings in wavelengths)."""
    ny = np.arange(geom.n_y)
    nz = np.arange(geom.n_z)
    a_y = np.exp(1j * 2.0 * np.pi * np.sin(theta_tx) * np.sin(phi_tx) * geom.d_ty * ny)
    a_z = np.exp(1j * 2.0 * np.pi * np.cos(theta_tx) * geom.d_tz * nz)
    return np.kron(a_y, a_z)


# ---------------------------------------------------------------------------
# channel coefficients and tables
# ---------------------------------------------------------------------------

def channel_coeff(k: int, n: int, m: int, t: float, ps: PathSet,
                  geom: ArrayGeometry, grid: PortGrid) -> complex:
    """Scalar channel between BS element ``k`` and port ``(n, m)`` at time ``t``.

    Direct per-path evaluation; :func:`channel_tables` is the vectorised form.
    """
    lam = ps.carrier_lambda
    d_tx = bs_antenna_position(k, geom, lam)
    d_rx = fa_port_position(n, m, grid, lam)
    total = 0.0 + 0.0j
    for alpha, p in zip(ps.alphas(), ps.paths):
        r_tx = spherical_unit_vector(p.theta_eod, p.phi_aod)
        r_rx = spherical_unit_vector(p.theta_eoa, p.phi_aoa)
        phase = 2.0 * np.pi * (r_rx @ d_rx / lam + r_tx @ d_tx / lam + p.doppler_w * t
                               + ps.freq_offset * p.tau)
        total += alpha * p.beta * np.exp(1j * phase)
    return complex(total)


def _path_arrays(ps: PathSet, geom: ArrayGeometry, grid: PortGrid):
    lam = ps.carrier_lambda
    alphas = ps.alphas()
    coef = np.array([a * p.beta * np.exp(1j * 2.0 * np.pi * ps.freq_offset * p.tau)
                     for a, p in zip(alphas, ps.paths)], dtype=np.complex128)
    tx = np.stack([steering_vector(p.theta_eod, p.phi_aod, geom) for p in ps.paths])
    dz = grid.spacing_z(lam) / lam
    dy = grid.spacing_y(lam) / lam
    kz = np.array([2.0 * np.pi * np.cos(p.theta_eoa) * dz for p in ps.paths])
    ky = np.array([2.0 * np.pi * np.sin(p.theta_eoa) * np.sin(p.phi_aoa) * dy for p in ps.paths])
    doppler = np.array([p.doppler_w for p in ps.paths], dtype=np.float64)
    return coef, np.ascontiguousarray(tx, dtype=np.complex128), kz, ky, doppler


def channel_tables(times: Sequence[float], ps: PathSet, geom: ArrayGeometry,
                   grid: PortGrid) -> np.ndarray:
    """Tables for every BS element at every time: ``(len(times), N_t, N, M)`` complex."""
    coef, tx, kz, ky, doppler = _path_arrays(ps, geom, grid)
    times = np.ascontiguousarray(np.atleast_1d(np.asarray(times, dtype=np.float64)))
    return kernels.synth_tables(coef, tx, kz, ky, doppler, times,
                                grid.n_ports_z, grid.n_ports_y)


def channel_table(i: int, t: float, ps: PathSet, geom: ArrayGeometry,
                  grid: PortGrid) -> np.ndarray:
    """N x M table between BS element ``i`` (1-based) and all ports at time ``t``."""
    element_indices(i, geom)
    return channel_tables([t], ps, geom, grid)[0, i - 1]


def channel_vector(n: int, m: int, t: float, ps: PathSet, geom: ArrayGeometry,
                   grid: PortGrid) -> np.ndarray:
    """Channel from all BS elements to port ``(n, m)``: ``A @ c_(n,m)(t)``."""
    fa_port_position(n, m, grid, ps.carrier_lambda)
    coef, tx, kz, ky, doppler = _path_arrays(ps, geom, grid)
    c = coef * np.exp(1j * (kz * (n - 1) + ky * (m - 1))) * np.exp(1j * 2.0 * np.pi * doppler * t)
    return tx.T @ c


def reference_table(h_ref, grid: PortGrid) -> np.ndarray:
    return np.full(grid.shape, complex(h_ref), dtype=np.complex128)
