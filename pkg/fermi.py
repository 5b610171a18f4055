"""Chemical potential at fixed density and zero-temperature Fermi energy."""

import logging
import math
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import bisect, brentq
from scipy.special import logsumexp

from bz import BandData, ThermoState, density, fermi_dirac, ids
from errors import CapacityError, ClassificationError, QuadratureError, SemimetalError
from surface import CUBE_CHUNK, TetraMesh, filled_fraction

logger = logging.getLogger("bloch_chi.fermi")

PLATEAU_TOL = 1e-9
GAP_FACTOR = 4.0
DENSITY_RTOL = 1e-10
UNDERFLOW_LOG = math.log(1e-300)
# smallest relative tolerance brentq accepts
BRENT_RTOL = 4.0 * np.finfo(float).eps


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class GapRow(BaseModel):
    model_config = ConfigDict(frozen=True)
    band: int = Field(..., description="N: the gap lies between bands N and N+1")
    top: float = Field(..., description="max over the grid of E_N")
    bottom: float = Field(..., description="min over the grid of E_{N+1}")

    @property
    def width(self) -> float:
        return self.bottom - self.top


class FermiClassification(BaseModel):
    """Zero-temperature Fermi energy: semiconductor or metal."""

    model_config = ConfigDict(frozen=True)
    variant: Literal["SC", "Metal"]
    band: int = Field(..., description="N: last filled band (SC) or band hosting E_M (Metal)")
    fermi_energy: float = Field(..., description="E_F (SC gap midpoint) or E_M (Metal)")
    gap_top: Optional[float] = Field(default=None, description="a_N (SC only)")
    gap_bottom: Optional[float] = Field(default=None, description="b_N (SC only)")
    overlapping_bands: list[int] = Field(
        default_factory=list, description="All bands straddling E_M when more than one does"
    )
    gap_table: list[GapRow] = Field(default_factory=list)

    @property
    def gap(self) -> float:
        if self.variant != "SC":
            raise ClassificationError("Gap is only defined for the SC variant")
        return self.gap_bottom - self.gap_top


# ---------------------------------------------------------------------------
# Band bookkeeping
# ---------------------------------------------------------------------------


def gap_table(bands: BandData) -> list[GapRow]:
    return [
        GapRow(band=n, top=bands.band_max(n), bottom=bands.band_min(n + 1))
        for n in range(1, bands.n_bands)
    ]


def band_spread(bands: BandData, n: int) -> float:
    """Largest energy step of band n between neighbouring grid points."""
    side = bands.grid.n_per_axis
    e = bands.band(n).reshape(side, side, side)
    if side == 1:
        return 0.0
    return float(max(np.abs(np.roll(e, -1, axis=a) - e).max() for a in range(3)))


def gap_tolerance(bands: BandData, n: int) -> float:
    return GAP_FACTOR * max(band_spread(bands, n), band_spread(bands, n + 1))


def _check_capacity(bands: BandData, rho0: float) -> None:
    if not 0 < rho0 < bands.n_bands:
        raise CapacityError(
            f"rho0={rho0} outside (0, {bands.n_bands}) for the truncated model",
            {"rho0": rho0, "capacity": bands.n_bands},
        )


def _plateau(bands: BandData, rho0: float) -> Optional[int]:
    n = round(rho0)
    if abs(rho0 - n) <= PLATEAU_TOL and 1 <= n < bands.n_bands:
        return int(n)
    return None


# ---------------------------------------------------------------------------
# Chemical potential
# ---------------------------------------------------------------------------


def _balance(bands: BandData, beta: float, filled: int):
    # log(electrons above band N) - log(holes in bands <= N); zero iff density = N
    lower = bands.energies[:, :filled].ravel()
    upper = bands.energies[:, filled:].ravel()

    def residual(mu: float) -> float:
        electrons = logsumexp(-np.logaddexp(0.0, beta * (upper - mu)))
        holes = logsumexp(-np.logaddexp(0.0, beta * (mu - lower)))
        return float(electrons - holes)

    return residual


def solve_mu(bands: BandData, beta: float, rho0: float) -> float:
    """mu with density(beta, mu) = rho0.

    Raises:
        CapacityError: rho0 not in (0, n_bands)
    """
    _check_capacity(bands, rho0)
    pad = (math.log(bands.n_bands) + 50.0) / beta + 1.0
    lo = float(bands.energies.min()) - pad
    hi = float(bands.energies.max()) + pad

    filled = _plateau(bands, rho0)
    if filled is not None:
        mu = brentq(_balance(bands, beta, filled), lo, hi, xtol=1e-14, rtol=BRENT_RTOL, maxiter=500)
    else:
        def residual(m: float) -> float:
            return density(bands, ThermoState(beta, m)) - rho0

        mu = brentq(residual, lo, hi, xtol=1e-14, rtol=BRENT_RTOL, maxiter=500)
        for _ in range(3):
            state = ThermoState(beta, mu)
            s = fermi_dirac(state, bands.energies)
            slope = beta * float(np.sum(s * (1.0 - s))) * bands.grid.weight
            r = residual(mu)
            if slope <= 0 or abs(r) <= DENSITY_RTOL * max(1.0, rho0) * 1e-3:
                break
            mu -= r / slope

    achieved = abs(density(bands, ThermoState(beta, mu)) - rho0)
    if achieved > DENSITY_RTOL * max(1.0, rho0):
        logger.warning("solve_mu residual %.3e above tolerance (beta=%g, rho0=%g)", achieved, beta, rho0)
    logger.debug("mu(beta=%g, rho0=%g) = %.15g", beta, rho0, mu)
    return float(mu)


def mu_sequence(bands: BandData, rho0: float, betas: Sequence[float], reference: float) -> list[dict]:
    """mu(beta) and its distance to a reference energy for each beta."""
    rows = []
    for beta in betas:
        mu = solve_mu(bands, beta, rho0)
        rows.append({"beta": beta, "mu": mu, "deviation": abs(mu - reference)})
    return rows


# ---------------------------------------------------------------------------
# Zero temperature
# ---------------------------------------------------------------------------


def ids_inverse(bands: BandData, rho0: float) -> float:
    """E_M with n(E_M) = rho0 on the piecewise-linear sampled IDS."""
    ladder = np.sort(bands.energies, axis=None)
    counts = np.arange(1, ladder.size + 1) * bands.grid.weight
    lo = bands.energy_floor - 1.0
    hi = float(ladder[-1]) + 1.0

    def residual(e: float) -> float:
        return float(np.interp(e, ladder, counts, left=0.0)) - rho0

    return float(bisect(residual, lo, hi, xtol=1e-13, maxiter=500))


def band_meshes(bands: BandData) -> list[TetraMesh]:
    return [TetraMesh.from_band(bands.grid, bands.band(n)) for n in range(1, bands.n_bands + 1)]


def tetrahedron_ids(bands: BandData, energy: float, corrected: bool = True) -> float:
    """IDS of the tetrahedron interpolant summed over the stored bands."""
    return sum(m.filled_volume(energy, corrected) for m in band_meshes(bands))


def tetrahedron_ids_inverse(bands: BandData, rho0: float, corrected: bool = True) -> float:
    """E with tetrahedron_ids(E) = rho0.

    The bracket grows around the sampled-IDS inverse until it straddles
    rho0; only tetrahedra cut by the bracket are kept for the root search.
    """
    _check_capacity(bands, rho0)
    meshes = band_meshes(bands)
    centre = ids_inverse(bands, rho0)
    step = max(max(band_spread(bands, n) for n in range(1, bands.n_bands + 1)), 1e-9)

    def total(level: float) -> float:
        return sum(m.filled_volume(level, corrected) for m in meshes)

    lo, widen = centre - step, step
    while total(lo) > rho0:
        widen *= 2.0
        lo -= widen
    hi, widen = centre + step, step
    while total(hi) < rho0:
        widen *= 2.0
        hi += widen

    full = 0
    active = []
    for mesh in meshes:
        for start in range(0, bands.grid.size, CUBE_CHUNK):
            cubes = np.arange(start, min(start + CUBE_CHUNK, bands.grid.size))
            e = mesh.tetrahedron_energies(cubes, corrected)
            full += int(np.count_nonzero(e[:, 3] <= lo))
            active.append(e[(e[:, 3] > lo) & (e[:, 0] < hi)])
    active = np.concatenate(active)
    per_tetra = 1.0 / (6 * bands.grid.size)

    def residual(level: float) -> float:
        return (full + float(np.sum(filled_fraction(active, level)))) * per_tetra - rho0

    level = float(brentq(residual, lo, hi, xtol=1e-14, rtol=BRENT_RTOL, maxiter=500))
    logger.debug(
        "Tetrahedron IDS inverse %.12g (rho0=%g, %d active tetrahedra, corrected=%s)",
        level, rho0, len(active), corrected,
    )
    return level


def classify(
    bands: BandData, rho0: float, method: Literal["tetrahedron", "sampled"] = "tetrahedron"
) -> FermiClassification:
    """SC when rho0 fills N bands below an open gap, otherwise Metal.

    A metal's E_M inverts the curvature-corrected tetrahedron IDS, or the
    sampled step IDS with ``method="sampled"``.

    Raises:
        CapacityError: rho0 not representable
        SemimetalError: the gap above band N is closed within tol_gap
    """
    _check_capacity(bands, rho0)
    table = gap_table(bands)
    filled = _plateau(bands, rho0)
    if filled is not None:
        row = table[filled - 1]
        tol = gap_tolerance(bands, filled)
        if row.top < row.bottom - tol:
            cls = FermiClassification(
                variant="SC",
                band=filled,
                fermi_energy=0.5 * (row.top + row.bottom),
                gap_top=row.top,
                gap_bottom=row.bottom,
                gap_table=table,
            )
            logger.info("Semiconductor: N=%d, gap [%.6g, %.6g]", filled, row.top, row.bottom)
            return cls
        if abs(row.top - row.bottom) <= tol:
            raise SemimetalError(
                f"Gap above band {filled} is closed within tolerance "
                f"({row.bottom - row.top:.3e}, tol_gap {tol:.3e})",
                {"band": filled, "top": row.top, "bottom": row.bottom, "tol_gap": tol},
            )

    if method == "tetrahedron":
        e_m = tetrahedron_ids_inverse(bands, rho0, corrected=True)
    else:
        e_m = ids_inverse(bands, rho0)
    straddling = [
        n for n in range(1, bands.n_bands + 1) if bands.band_min(n) < e_m < bands.band_max(n)
    ]
    if not straddling:
        straddling = [
            n for n in range(1, bands.n_bands + 1) if bands.band_min(n) <= e_m <= bands.band_max(n)
        ]
    if not straddling:
        # the corrected level can sit just below the lowest sampled energy of a band
        distance = [
            max(bands.band_min(n) - e_m, e_m - bands.band_max(n)) for n in range(1, bands.n_bands + 1)
        ]
        nearest = int(np.argmin(distance)) + 1
        if distance[nearest - 1] > band_spread(bands, nearest):
            raise ClassificationError(f"No band contains E_M={e_m}")
        logger.warning("E_M=%.6g outside the sampled range of band %d", e_m, nearest)
        straddling = [nearest]
    if len(straddling) > 1:
        logger.warning("E_M=%.6g lies in bands %s; reporting the lowest", e_m, straddling)
    logger.info("Metal: N=%d, E_M=%.10g", straddling[0], e_m)
    return FermiClassification(
        variant="Metal",
        band=straddling[0],
        fermi_energy=e_m,
        overlapping_bands=straddling if len(straddling) > 1 else [],
        gap_table=table,
    )


def sc_fixed_point_map(
    bands: BandData,
    rho0: float,
    beta: float,
    x: float,
    classification: Optional[FermiClassification] = None,
) -> float:
    """Evaluate f(x) = c_N + (1/2 beta) [ln I_low(x) - ln I_up(x)].

    Approximation: the continuum IDS in both lambda-integrals is replaced
    by the sampled step IDS, i.e. a weight w = 1/n^3 at every grid energy.
    The integrals are then sums of exact antiderivatives, with no adaptive
    quadrature and no quadrature error:
        I_low = (e^{beta(x - a)} / beta) w sum_{E <= a} 1 / (1 + e^{beta(x - E)})
        I_up  = (e^{beta(b - x)} / beta) w sum_{E >= b} 1 / (1 + e^{beta(E - x)})
    The IDS difference at b_N uses its left limit, so every state of band
    N+1 contributes. The only error against the continuum map is the grid
    error of the IDS itself, and the fixed point is exactly the grid
    density equation solved by solve_mu.
    """
    cls = classification or classify(bands, rho0)
    if cls.variant != "SC":
        raise ClassificationError("Fixed-point map needs an open gap (SC classification)")
    n, a, b = cls.band, cls.gap_top, cls.gap_bottom
    lower = bands.energies[:, :n].ravel()
    upper = bands.energies[:, n:].ravel()
    common = math.log(bands.grid.weight) - math.log(beta)
    log_low = beta * (x - a) + common + logsumexp(-np.logaddexp(0.0, beta * (x - lower)))
    log_up = beta * (b - x) + common + logsumexp(-np.logaddexp(0.0, beta * (upper - x)))
    if log_low < UNDERFLOW_LOG and log_up < UNDERFLOW_LOG:
        raise QuadratureError(
            f"Both edge integrals underflow at beta={beta}; beta too large for this gap",
            float(max(log_low, log_up)),
        )
    return 0.5 * (a + b) + (log_low - log_up) / (2.0 * beta)


def gap_edge_constant(bands: BandData, n: int, deltas: Sequence[float] = (0.05, 0.1, 0.2)) -> float:
    """Largest C with n(a_N) - n(a_N - delta) >= C delta^3 on the deltas."""
    top = bands.band_max(n)
    at_top = ids(bands, top)
    return min((at_top - ids(bands, top - d)) / d ** 3 for d in deltas)
