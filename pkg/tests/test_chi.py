"""Unit tests for chi.py — coefficient functions and susceptibility paths."""

import math

import numpy as np
import pytest

from bz import BandData, BZGrid, band_data
from chi import (
    c2_matrix,
    c4_tensor,
    chi_finite_T,
    chi_zero_T_metal,
    chi_zero_T_SC,
    coeff_C2,
    coeff_C4,
    coeffs_via_residues,
    explicit_coeffs,
    f_coefficient,
    grid_solution,
    hessian_minor,
    integration_by_parts_residual,
    map_points,
    matrix_contour_oracle,
)
from errors import ClassificationError, CutoffError, DegeneracyError
from fiber import plane_wave_basis, rephase, solve
from potential import FourierPotential, named_potential

K_GENERIC = np.array([0.3, 0.2, 0.1])


@pytest.fixture
def free_sol():
    return solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)


@pytest.fixture
def cosine_sol():
    return solve(named_potential("cosine3d", 1.0), plane_wave_basis(1), K_GENERIC)


def _synthetic(*columns) -> BandData:
    return BandData(FourierPotential(), plane_wave_basis(0), BZGrid(2), np.stack(columns, axis=1))


# ---------------------------------------------------------------------------
# Coefficient tensors
# ---------------------------------------------------------------------------


class TestTensors:
    """Tests for C4 and C2."""

    def test_c4_vanishes_on_equal_indices(self, cosine_sol) -> None:
        for j in range(1, 5):
            assert coeff_C4(cosine_sol, j, j, j, j) == 0

    def test_c4_tensor_matches_scalar(self, cosine_sol) -> None:
        c4 = c4_tensor(cosine_sol, 4)
        assert c4[0, 1, 2, 3] == pytest.approx(coeff_C4(cosine_sol, 1, 2, 3, 4), abs=1e-12)
        assert c4[2, 0, 3, 1] == pytest.approx(coeff_C4(cosine_sol, 3, 1, 4, 2), abs=1e-12)

    def test_c2_symmetric_non_negative(self, cosine_sol) -> None:
        c2 = c2_matrix(cosine_sol, 6)
        np.testing.assert_allclose(c2, c2.T, atol=1e-12)
        assert c2.min() >= 0.0
        assert c2[1, 4] == pytest.approx(coeff_C2(cosine_sol, 2, 5))

    def test_c4_gauge_invariant(self, cosine_sol) -> None:
        phases = np.exp(2j * math.pi * np.random.default_rng(2).random(cosine_sol.dimension))
        rotated = rephase(cosine_sol, phases)
        np.testing.assert_allclose(c4_tensor(rotated, 5), c4_tensor(cosine_sol, 5), atol=1e-11)


# ---------------------------------------------------------------------------
# Explicit coefficients
# ---------------------------------------------------------------------------


class TestExplicitCoeffs:
    """Closed forms for l = 2, 3."""

    def test_free_electron(self, free_sol) -> None:
        coeffs = explicit_coeffs(free_sol, 1, 3)
        assert coeffs.c[2] == pytest.approx(0.5)
        assert coeffs.c[3] == pytest.approx((0.3 ** 2 + 0.2 ** 2) / 6)
        assert coeffs.a[2] == pytest.approx(0.0, abs=1e-15)
        assert coeffs.b[2] == pytest.approx(0.5)
        assert math.isnan(coeffs.c[0])

    def test_free_f_coefficient_and_minor(self, free_sol) -> None:
        assert f_coefficient(free_sol, 1, 3) == pytest.approx(0.0, abs=1e-15)
        assert hessian_minor(free_sol, 1) == pytest.approx(1.0)

    def test_f1_vanishes_at_gamma(self) -> None:
        gamma = solve(named_potential("cosine3d", 2.0), plane_wave_basis(1), np.zeros(3))
        assert abs(f_coefficient(gamma, 1, 27)) <= 1e-8

    def test_degenerate_band(self) -> None:
        gamma = solve(FourierPotential(), plane_wave_basis(1), np.zeros(3))
        with pytest.raises(DegeneracyError, match="residue path") as exc_info:
            explicit_coeffs(gamma, 2, 10)
        assert exc_info.value.band == 2

    def test_band_above_cutoff(self, cosine_sol) -> None:
        with pytest.raises(CutoffError, match="above the band cutoff"):
            explicit_coeffs(cosine_sol, 5, 3)

    def test_cutoff_beyond_basis(self, cosine_sol) -> None:
        with pytest.raises(CutoffError, match="outside"):
            explicit_coeffs(cosine_sol, 1, 28)


# ---------------------------------------------------------------------------
# Residue coefficients
# ---------------------------------------------------------------------------


class TestCoefficientTable:
    """Tests for coeffs_via_residues()."""

    def test_free_electron(self, free_sol) -> None:
        table = coeffs_via_residues(free_sol, 3)
        np.testing.assert_allclose(table.c[:, 2], 0.5)
        assert table.c[0, 3] == pytest.approx((0.3 ** 2 + 0.2 ** 2) / 6)
        np.testing.assert_allclose(table.c[:, :2], 0.0, atol=1e-15)
        assert table.merged_bands == 0

    def test_dual_path(self, cosine_sol) -> None:
        table = coeffs_via_residues(cosine_sol, 12)
        scale = 1.0 + float(np.abs(table.c).max())
        for band in (1, 2, 3):
            explicit = explicit_coeffs(cosine_sol, band, 12)
            residue = table.coefficients(band)
            np.testing.assert_allclose(residue.c[2:], explicit.c[2:], atol=1e-8 * scale)
            np.testing.assert_allclose(residue.a[2:], explicit.a[2:], atol=1e-8 * scale)

    def test_l4_bucket_vanishes(self, cosine_sol) -> None:
        table = coeffs_via_residues(cosine_sol, 12)
        assert table.l4_bucket <= 1e-12 * (1.0 + float(np.abs(table.c).max()))

    def test_gauge_invariance(self, cosine_sol) -> None:
        phases = np.exp(2j * math.pi * np.random.default_rng(9).random(cosine_sol.dimension))
        table = coeffs_via_residues(cosine_sol, 10)
        rotated = coeffs_via_residues(rephase(cosine_sol, phases), 10)
        np.testing.assert_allclose(rotated.c, table.c, atol=1e-10 * (1.0 + float(np.abs(table.c).max())))

    def test_real_coefficients(self, cosine_sol) -> None:
        table = coeffs_via_residues(cosine_sol, 10)
        assert table.imag_residue <= 1e-10 * (1.0 + float(np.abs(table.c).max()))

    def test_degenerate_point_is_merged(self) -> None:
        gamma = solve(FourierPotential(), plane_wave_basis(1), np.zeros(3))
        table = coeffs_via_residues(gamma, 7)
        assert table.merged_bands == 6
        assert np.all(np.isfinite(table.c))

    def test_bad_cutoff(self, cosine_sol) -> None:
        with pytest.raises(CutoffError):
            coeffs_via_residues(cosine_sol, 0)


# ---------------------------------------------------------------------------
# Per-point plumbing
# ---------------------------------------------------------------------------


class TestPlumbing:
    """Tests for map_points() and grid_solution()."""

    def test_map_points_keeps_order(self) -> None:
        assert map_points(lambda i: i * i, range(6), threads=3) == [0, 1, 4, 9, 16, 25]

    def test_phase_seed_is_deterministic(self) -> None:
        bands = band_data(named_potential("cosine3d", 1.0), plane_wave_basis(1), BZGrid(2), n_bands=2)
        one = grid_solution(bands, 3, phase_seed=7)
        two = grid_solution(bands, 3, phase_seed=7)
        np.testing.assert_array_equal(one.pi_hat, two.pi_hat)
        np.testing.assert_array_equal(one.energies, grid_solution(bands, 3).energies)


# ---------------------------------------------------------------------------
# Finite temperature
# ---------------------------------------------------------------------------


class TestChiFiniteT:
    """Tests for chi_finite_T()."""

    @pytest.fixture(scope="class")
    def free_bands(self) -> BandData:
        return band_data(FourierPotential(), plane_wave_basis(1), BZGrid(6), n_bands=4)

    def test_free_gas_is_diamagnetic(self, free_bands: BandData) -> None:
        result = chi_finite_T(free_bands, 2.0, rho0=0.1)
        assert result.kind == "finite_T"
        assert result.value < 0
        assert result.spinful_value == 2.0 * result.value
        assert result.band_cutoff == 3
        assert result.diagnostics["assembly_mismatch"] <= 1e-12

    def test_fixed_mu_matches_fixed_density(self, free_bands: BandData) -> None:
        by_density = chi_finite_T(free_bands, 2.0, rho0=0.1)
        by_mu = chi_finite_T(free_bands, 2.0, mu=by_density.mu)
        assert by_mu.value == pytest.approx(by_density.value, rel=1e-12)
        assert by_mu.rho0 == pytest.approx(0.1, abs=1e-10)

    def test_requires_exactly_one_of_rho0_and_mu(self, free_bands: BandData) -> None:
        with pytest.raises(ValueError, match="Exactly one"):
            chi_finite_T(free_bands, 2.0, rho0=0.1, mu=0.5)
        with pytest.raises(ValueError, match="Exactly one"):
            chi_finite_T(free_bands, 2.0)

    def test_gauge_and_threads(self) -> None:
        bands = band_data(named_potential("cosine3d", 1.0), plane_wave_basis(1), BZGrid(2), n_bands=6)
        base = chi_finite_T(bands, 3.0, rho0=0.5, band_cutoff=27)
        rotated = chi_finite_T(bands, 3.0, rho0=0.5, band_cutoff=27, phase_seed=4, threads=4)
        assert rotated.value == pytest.approx(base.value, rel=1e-9, abs=1e-14)

    @pytest.mark.slow
    def test_matches_matrix_oracle(self) -> None:
        bands = band_data(named_potential("cosine3d", 1.0), plane_wave_basis(1), BZGrid(2), n_bands=6)
        residue = chi_finite_T(bands, 3.0, rho0=0.5, band_cutoff=bands.capacity)
        oracle = matrix_contour_oracle(bands, 3.0, mu=residue.mu, nodes=32, check=False)
        assert residue.value == pytest.approx(oracle.value, rel=1e-6)

    @pytest.mark.slow
    def test_matches_matrix_oracle_at_beta_ten(self) -> None:
        bands = band_data(named_potential("cosine3d", 2.0), plane_wave_basis(1), BZGrid(4), n_bands=6)
        residue = chi_finite_T(bands, 10.0, rho0=0.5, band_cutoff=bands.capacity)
        oracle = matrix_contour_oracle(bands, 10.0, mu=residue.mu, nodes=32, check=False)
        assert residue.value == pytest.approx(oracle.value, rel=1e-6)


# ---------------------------------------------------------------------------
# Zero temperature
# ---------------------------------------------------------------------------


class TestZeroTemperature:
    """Variant checks and the free-electron metal limit."""

    @pytest.fixture
    def insulator(self) -> BandData:
        ramp = np.arange(8.0)
        return _synthetic(0.01 * ramp, 5.0 + 0.02 * ramp)

    def test_sc_path_rejects_metal(self, insulator: BandData) -> None:
        with pytest.raises(ClassificationError, match="needs a semiconductor"):
            chi_zero_T_SC(insulator, 0.5)

    def test_metal_path_rejects_sc(self, insulator: BandData) -> None:
        with pytest.raises(ClassificationError, match="needs a metal"):
            chi_zero_T_metal(insulator, 1.0)

    @pytest.mark.slow
    def test_free_metal_surface_only(self) -> None:
        bands = band_data(FourierPotential(), plane_wave_basis(1), BZGrid(16), n_bands=2, velocities=True)
        result = chi_zero_T_metal(bands, 0.05)
        k_f = math.sqrt(2.0 * result.fermi_energy)
        assert result.volume_term == pytest.approx(0.0, abs=1e-12)
        # the surface sits on the isolevel that encloses exactly rho0
        assert result.diagnostics["surface_level"] > result.fermi_energy
        assert result.surface_term == pytest.approx(4 * math.pi * k_f, rel=0.05)
        assert result.value == pytest.approx(-k_f / (24 * math.pi ** 2), rel=0.05)


# ---------------------------------------------------------------------------
# Finite T against zero T
# ---------------------------------------------------------------------------


def _relative_gap(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


class TestLowTemperatureLimit:
    """chi_finite_T approaches the zero-temperature paths as beta grows."""

    @pytest.mark.slow
    def test_semiconductor(self) -> None:
        bands = band_data(named_potential("separable_gap", 1.0), plane_wave_basis(1), BZGrid(16), n_bands=8)
        zero_t = chi_zero_T_SC(bands, 1.0, band_cutoff=8)
        finite_t = chi_finite_T(bands, 200.0, rho0=1.0, band_cutoff=8)
        assert _relative_gap(finite_t.value, zero_t.value) <= 0.01

    @pytest.mark.slow
    def test_metal_gap_shrinks(self) -> None:
        bands = band_data(
            named_potential("cosine3d", 0.5), plane_wave_basis(1), BZGrid(40), n_bands=8, velocities=True
        )
        zero_t = chi_zero_T_metal(bands, 0.1, band_cutoff=8)
        gaps = [
            _relative_gap(chi_finite_T(bands, beta, rho0=0.1, band_cutoff=8).value, zero_t.value)
            for beta in (2.5, 5.0)
        ]
        assert gaps[1] < gaps[0]
        assert gaps[1] <= 0.02


class TestIntegrationByParts:
    """Both sides of the integration-by-parts identity converge together."""

    @pytest.mark.slow
    def test_mismatch_shrinks_with_grid(self) -> None:
        pot = named_potential("cosine3d", 1.0)
        mismatch = []
        for n in (8, 16):
            bands = band_data(pot, plane_wave_basis(1), BZGrid(n), n_bands=8)
            lhs, rhs = integration_by_parts_residual(bands, 1.0, 0.5, 1)
            assert lhs != 0.0
            mismatch.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
        assert mismatch[1] < mismatch[0] or mismatch[1] <= 1e-12
