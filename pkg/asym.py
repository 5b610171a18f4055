"""Low-density asymptotics of the lowest band.

Near its simple minimum E_1(k) = E_0 + 1/2 sum_i k_i^2 / m_i + O(k^4), which gives

    E_F - E_0 = s rho0^(2/3) + O(rho0^(4/3)),  s = (6 pi^2)^(2/3) / 2 (m1 m2 m3)^(-1/3)
    chi_M / k_F -> -(m1 m2 m3)^(1/3) / (24 pi^2 m1 m2),  k_F = (6 pi^2 rho0)^(1/3)

All values are spinless; the spinful slope is twice as large.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bz import BandData, band_data
from cache import EigenCache
from chi import chi_zero_T_metal
from errors import ClassificationError, CutoffError
from fermi import classify, tetrahedron_ids_inverse
from fiber import PlaneWaveBasis, hessian, solve
from potential import FourierPotential
from surface import TetraMesh, surface_integral

logger = logging.getLogger("bloch_chi.asym")

DEFAULT_LADDER = (1e-3, 5e-4, 2e-4)
SIX_PI_SQ = 6.0 * math.pi ** 2
SWEEP_COLUMNS = ("rho0", "k_F", "chi", "chi_over_kF", "prediction")


class EffectiveMass(BaseModel):
    model_config = ConfigDict(frozen=True)
    m_star: list[float] = Field(..., description="Masses along the principal axes, ordered like x, y, z")
    axes: list[list[float]] = Field(..., description="Principal axes as rows")
    energy_floor: float = Field(..., description="E_0 = E_1(k=0)")


class FermiFit(BaseModel):
    model_config = ConfigDict(frozen=True)
    s: float
    correction: float = Field(..., description="Coefficient of rho0^(4/3)")
    energy_floor: float
    residual: float


class SweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)
    rho0: float
    k_F: float
    chi: float
    chi_over_kF: float
    prediction: float


class AsymptoticsReport(BaseModel):
    """Landau-Peierls ladder with its extrapolated slope."""

    model_config = ConfigDict(frozen=True)
    m_star: list[float]
    s_coeff: float
    fitted_s: Optional[float] = None
    rows: list[SweepRow]
    chi_slope: float
    lp_prediction: float
    relative_error: float
    spinful_slope: float


def fermi_wavevector(rho0: float) -> float:
    return (SIX_PI_SQ * rho0) ** (1.0 / 3.0)


def effective_mass(pot: FourierPotential, basis: PlaneWaveBasis) -> EffectiveMass:
    """Principal masses from the Hessian of E_1 at k = 0.

    Raises:
        CutoffError: a Hessian eigenvalue is not positive
    """
    sol = solve(pot, basis, np.zeros(3))
    curvature, vectors = np.linalg.eigh(hessian(sol, 1))
    if np.any(curvature <= 0):
        raise CutoffError(
            f"Hessian of E_1 at k=0 is not positive definite (eigenvalues {curvature.tolist()}); "
            "increase cutoff_n or check the potential"
        )
    # assign each principal axis to the Cartesian direction it is closest to
    order = np.argsort(np.argmax(np.abs(vectors), axis=0), kind="stable")
    masses = 1.0 / curvature[order]
    axes = vectors[:, order].T
    logger.info("Effective masses %s", np.round(masses, 10).tolist())
    return EffectiveMass(m_star=masses.tolist(), axes=axes.tolist(), energy_floor=float(sol.energies[0]))


def s_coefficient(m_star: Sequence[float]) -> float:
    return SIX_PI_SQ ** (2.0 / 3.0) / 2.0 * float(np.prod(m_star)) ** (-1.0 / 3.0)


def lp_prediction(m_star: Sequence[float]) -> float:
    m1, m2, m3 = m_star
    return -((m1 * m2 * m3) ** (1.0 / 3.0)) / (24.0 * math.pi ** 2 * m1 * m2)


def _metal_in_band_one(bands: BandData, rho0: float, method: str = "tetrahedron"):
    cls = classify(bands, rho0, method)
    if cls.variant != "Metal" or cls.band != 1:
        raise ClassificationError(
            f"rho0={rho0} is not a band-1 metal ({cls.variant}, N={cls.band}); use a smaller density"
        )
    return cls


def fermi_energy_expansion(
    bands: BandData, rho_ladder: Sequence[float], energy_floor: Optional[float] = None
) -> FermiFit:
    """Least-squares fit of E_M - E_0 against rho0^(2/3) and rho0^(4/3)."""
    if len(rho_ladder) < 2:
        raise ValueError("Fermi-energy fit needs at least two densities")
    if energy_floor is None:
        energy_floor = float(solve(bands.pot, bands.basis, np.zeros(3)).energies[0])
    rho = np.asarray(rho_ladder, dtype=float)
    e_m = np.array([_metal_in_band_one(bands, r).fermi_energy for r in rho])
    design = np.stack([rho ** (2.0 / 3.0), rho ** (4.0 / 3.0)], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, e_m - energy_floor, rcond=None)
    residual = float(np.abs(design @ coeffs - (e_m - energy_floor)).max())
    logger.info("Fitted s = %.8g", coeffs[0])
    return FermiFit(s=float(coeffs[0]), correction=float(coeffs[1]), energy_floor=energy_floor, residual=residual)


def _with_velocities(bands: BandData, threads: int, cache: Optional[EigenCache]) -> BandData:
    if bands.velocities is not None:
        return bands
    return band_data(bands.pot, bands.basis, bands.grid, bands.n_bands, velocities=True, threads=threads, cache=cache)


def volume_asymptotics(bands: BandData, rho0: float, method: str = "tetrahedron") -> float:
    """(1/n^3) #{k : E_1(k) <= E_F} / rho0; tends to 1 as rho0 -> 0."""
    level = _metal_in_band_one(bands, rho0, method).fermi_energy
    occupied = np.count_nonzero(bands.band(1) <= level) * bands.grid.weight
    return occupied / rho0


def surface_asymptotics(
    bands: BandData,
    rho0: float,
    m_star: Optional[Sequence[float]] = None,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
) -> tuple[float, float]:
    """Fermi-surface integral of dsigma / |grad E_1| over rho0^(1/3), and its limit.

    The limit is 4 pi (6 pi^2)^(1/3) (m1 m2 m3)^(1/6). The surface is the
    isolevel of the interpolated band that encloses exactly rho0.
    """
    _metal_in_band_one(bands, rho0)
    level = tetrahedron_ids_inverse(bands, rho0, corrected=False)
    bands = _with_velocities(bands, threads, cache)
    mesh = TetraMesh.from_band(bands.grid, bands.band(1), bands.velocities[:, 0])
    value = surface_integral(mesh, level, np.ones(bands.grid.size)).value
    factor = float(np.prod(m_star)) ** (1.0 / 6.0) if m_star is not None else 1.0
    return value / rho0 ** (1.0 / 3.0), 4.0 * math.pi * SIX_PI_SQ ** (1.0 / 3.0) * factor


def richardson_slope(rows: Sequence[SweepRow]) -> float:
    """Eliminate the k_F^2 correction of chi / k_F using the two smallest densities."""
    first, second = sorted(rows, key=lambda r: r.rho0)[:2]
    x1, y1 = first.k_F, first.chi_over_kF
    x2, y2 = second.k_F, second.chi_over_kF
    return (x2 ** 2 * y1 - x1 ** 2 * y2) / (x2 ** 2 - x1 ** 2)


def landau_peierls_check(
    bands: BandData,
    rho_ladder: Sequence[float] = DEFAULT_LADDER,
    band_cutoff: Optional[int] = None,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
    fit_fermi_energy: bool = True,
) -> AsymptoticsReport:
    """chi_M along a density ladder against the effective-mass prediction."""
    if len(rho_ladder) < 2:
        raise ValueError("Landau-Peierls check needs at least two densities")
    mass = effective_mass(bands.pot, bands.basis)
    prediction = lp_prediction(mass.m_star)
    bands = _with_velocities(bands, threads, cache)

    rows = []
    for rho0 in rho_ladder:
        _metal_in_band_one(bands, rho0)
        result = chi_zero_T_metal(bands, rho0, band_cutoff=band_cutoff, threads=threads, cache=cache)
        k_f = fermi_wavevector(rho0)
        rows.append(
            SweepRow(rho0=rho0, k_F=k_f, chi=result.value, chi_over_kF=result.value / k_f, prediction=prediction)
        )
        logger.info("rho0=%g: chi_M=%.8g, chi/k_F=%.8g", rho0, result.value, result.value / k_f)

    slope = richardson_slope(rows)
    fitted = None
    if fit_fermi_energy:
        fitted = fermi_energy_expansion(bands, rho_ladder, mass.energy_floor).s
    return AsymptoticsReport(
        m_star=mass.m_star,
        s_coeff=s_coefficient(mass.m_star),
        fitted_s=fitted,
        rows=rows,
        chi_slope=slope,
        lp_prediction=prediction,
        relative_error=abs(slope - prediction) / abs(prediction),
        spinful_slope=2.0 * slope,
    )


def write_sweep_csv(report: AsymptoticsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in report.rows:
            writer.writerow([repr(getattr(row, c)) for c in SWEEP_COLUMNS])
    return path
