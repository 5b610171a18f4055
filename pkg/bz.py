"""Brillouin-zone grids, Fermi kernels, IDS and grand-canonical density."""

import asyncio
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy.special import expit

from cache import EigenCache
from errors import ResidueOrderError
from fiber import PlaneWaveBasis, band_arrays, chunk_size
from potential import TWO_PI, FourierPotential

logger = logging.getLogger("bloch_chi.bz")

MAX_DERIVATIVE_ORDER = 7


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BZGrid:
    """Uniform n^3 grid over (-pi, pi]^3, each point weighted 1/n^3.

    Shifted grids sit at cell centres (-pi + (i + 1/2) h) and avoid k = 0;
    unshifted grids use -pi + (i + 1) h and contain Gamma for even n.
    """

    n_per_axis: int
    shift: bool = True

    def __post_init__(self):
        if self.n_per_axis < 1:
            raise ValueError(f"n_per_axis must be positive, got {self.n_per_axis}")

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n_per_axis

    @property
    def size(self) -> int:
        return self.n_per_axis ** 3

    @property
    def weight(self) -> float:
        return 1.0 / self.size

    @property
    def key(self) -> str:
        return f"n{self.n_per_axis}{'s' if self.shift else 'u'}"

    @cached_property
    def axis(self) -> np.ndarray:
        offset = 0.5 if self.shift else 1.0
        return -math.pi + (np.arange(self.n_per_axis) + offset) * self.spacing

    @cached_property
    def points(self) -> np.ndarray:
        a = self.axis
        mesh = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        return mesh.reshape(-1, 3)

    def flat_index(self, i, j, k):
        n = self.n_per_axis
        return (np.asarray(i) % n) * n * n + (np.asarray(j) % n) * n + np.asarray(k) % n


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThermoState:
    beta: float
    mu: float

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")

    @property
    def z(self) -> float:
        """Fugacity e^{beta mu} (inf when it overflows)."""
        try:
            return math.exp(self.beta * self.mu)
        except OverflowError:
            return math.inf


@lru_cache(maxsize=1)
def _logistic_polynomials() -> tuple[dict[tuple[int, int], int], ...]:
    # d^n f_FD / dxi^n = (-beta)^n P_n(s, r), s = f_FD, r = 1 - f_FD
    polys = [{(1, 0): 1}]
    for _ in range(MAX_DERIVATIVE_ORDER):
        nxt: dict[tuple[int, int], int] = {}
        for (a, b), c in polys[-1].items():
            if a:
                nxt[(a, b + 1)] = nxt.get((a, b + 1), 0) + a * c
            if b:
                nxt[(a + 1, b)] = nxt.get((a + 1, b), 0) - b * c
        polys.append({key: c for key, c in nxt.items() if c})
    return tuple(polys)


def _occupations(state: ThermoState, xi) -> tuple[np.ndarray, np.ndarray]:
    t = state.beta * (np.asarray(xi, dtype=float) - state.mu)
    return expit(-t), expit(t)


def fermi_dirac(state: ThermoState, xi) -> np.ndarray:
    """f_FD = 1 / (e^{beta (xi - mu)} + 1)."""
    return _occupations(state, xi)[0]


def fermi_dirac_derivative(state: ThermoState, xi, order: int = 1) -> np.ndarray:
    if not 0 <= order <= MAX_DERIVATIVE_ORDER:
        raise ResidueOrderError(f"f_FD derivative order {order} not supported")
    s, r = _occupations(state, xi)
    poly = _logistic_polynomials()[order]
    value = sum(c * s ** a * r ** b for (a, b), c in poly.items())
    return (-state.beta) ** order * value


def fermi_derivatives(state: ThermoState, xi, order: int) -> np.ndarray:
    """Stack of d^l f / dxi^l for l = 0..order, f = ln(1 + e^{beta (mu - xi)}).

    l = 0 is a stable softplus; l >= 1 uses f^(l) = -beta d^{l-1} f_FD.
    """
    if not 0 <= order <= MAX_DERIVATIVE_ORDER + 1:
        raise ResidueOrderError(
            f"Derivative order {order} of the Fermi kernel exceeds the recurrence depth "
            f"{MAX_DERIVATIVE_ORDER + 1}"
        )
    xi = np.asarray(xi, dtype=float)
    out = np.empty((order + 1,) + xi.shape)
    out[0] = np.logaddexp(0.0, state.beta * (state.mu - xi))
    if order:
        s, r = _occupations(state, xi)
        polys = _logistic_polynomials()
        for l in range(1, order + 1):
            value = sum(c * s ** a * r ** b for (a, b), c in polys[l - 1].items())
            out[l] = (-1) ** l * state.beta ** l * value
    return out


def f_log(state: ThermoState, xi, l: int = 0) -> np.ndarray:
    return fermi_derivatives(state, xi, l)[l]


# ---------------------------------------------------------------------------
# Band data shared by ids, density and the susceptibility paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BandData:
    """Grid eigendata: energies (nk, n_bands), optional band velocities."""

    pot: FourierPotential
    basis: PlaneWaveBasis
    grid: BZGrid
    energies: np.ndarray
    velocities: Optional[np.ndarray] = None

    @property
    def n_bands(self) -> int:
        return self.energies.shape[1]

    @property
    def capacity(self) -> int:
        """States per unit cell in the truncated model."""
        return self.basis.dimension

    @property
    def energy_floor(self) -> float:
        """E_0: minimum of E_1 over the grid."""
        return float(self.energies[:, 0].min())

    def band(self, n: int) -> np.ndarray:
        return self.energies[:, n - 1]

    def band_min(self, n: int) -> float:
        return float(self.energies[:, n - 1].min())

    def band_max(self, n: int) -> float:
        return float(self.energies[:, n - 1].max())


async def band_data_async(
    pot: FourierPotential,
    basis: PlaneWaveBasis,
    grid: BZGrid,
    n_bands: Optional[int] = None,
    velocities: bool = False,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
) -> BandData:
    n_bands = basis.dimension if n_bands is None else min(n_bands, basis.dimension)
    if cache is not None:
        hit = cache.load_bands(pot, basis, grid.key, grid.size, n_bands, velocities)
        if hit is not None:
            return BandData(pot, basis, grid, hit[0], hit[1])

    points = grid.points
    step = chunk_size(basis)
    semaphore = asyncio.Semaphore(max(1, threads))

    async def _chunk(start: int):
        async with semaphore:
            return await asyncio.to_thread(
                band_arrays, pot, basis, points[start:start + step], n_bands, velocities
            )

    chunks = await asyncio.gather(*(_chunk(s) for s in range(0, len(points), step)))
    energies = np.concatenate([c[0] for c in chunks])
    vel = np.concatenate([c[1] for c in chunks]) if velocities else None
    logger.info(
        "Solved %d k-points (cutoff %d, %d bands kept)", grid.size, basis.cutoff_n, n_bands
    )
    if cache is not None:
        cache.store_bands(pot, basis, grid.key, energies, vel)
    return BandData(pot, basis, grid, energies, vel)


def band_data(pot, basis, grid, n_bands=None, velocities=False, threads=1, cache=None) -> BandData:
    return asyncio.run(band_data_async(pot, basis, grid, n_bands, velocities, threads, cache))


def ids(bands: BandData, energy: float) -> float:
    """(1/n^3) sum_k #{j : E_j(k) <= E} over the stored bands."""
    return np.count_nonzero(bands.energies <= energy) * bands.grid.weight


def density(bands: BandData, state: ThermoState) -> float:
    """(1/n^3) sum_k sum_j f_FD(E_j(k))."""
    return float(np.sum(fermi_dirac(state, bands.energies))) * bands.grid.weight
