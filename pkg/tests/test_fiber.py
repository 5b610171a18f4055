"""Unit tests for fiber.py — plane-wave fibers, sum rules and gauge."""

import math

import numpy as np
import pytest

from errors import CutoffError, DegeneracyError
from fiber import (
    assemble,
    band_arrays,
    band_velocity,
    degeneracy_threshold,
    hessian,
    is_isolated,
    plane_wave_basis,
    potential_matrix,
    rephase,
    second_derivative_sum_rule,
    solve,
    solve_async,
    solve_many,
)
from potential import FourierPotential, named_potential

K_GENERIC = np.array([0.3, 0.2, 0.1])


def _energy(pot, basis, k, band):
    return solve(pot, basis, k).energies[band - 1]


# ---------------------------------------------------------------------------
# Basis and assembly
# ---------------------------------------------------------------------------


class TestBasis:
    """Tests for plane_wave_basis() and potential_matrix()."""

    def test_dimension_and_order(self) -> None:
        basis = plane_wave_basis(1)
        assert basis.dimension == 27
        assert tuple(basis.vectors[0]) == (-1, -1, -1)
        assert tuple(basis.vectors[13]) == (0, 0, 0)
        assert tuple(basis.vectors[-1]) == (1, 1, 1)

    def test_memoized(self) -> None:
        assert plane_wave_basis(2) is plane_wave_basis(2)

    def test_negative_cutoff(self) -> None:
        with pytest.raises(CutoffError):
            plane_wave_basis(-1)

    def test_cutoff_below_support(self) -> None:
        pot = FourierPotential.from_mapping({(2, 0, 0): 1.0, (-2, 0, 0): 1.0})
        with pytest.raises(CutoffError, match="support radius 2"):
            potential_matrix(pot, plane_wave_basis(1))

    def test_hamiltonian_hermitian(self) -> None:
        h = assemble(named_potential("cosine3d", 2.0), plane_wave_basis(1), K_GENERIC)
        np.testing.assert_allclose(h, h.conj().T, atol=0)

    def test_free_diagonal(self) -> None:
        basis = plane_wave_basis(1)
        h = assemble(FourierPotential(), basis, np.zeros(3))
        expected = 0.5 * np.sum(basis.cartesian ** 2, axis=1)
        np.testing.assert_allclose(np.diag(h).real, expected)
        assert np.count_nonzero(h - np.diag(np.diag(h))) == 0


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


class TestSolve:
    """Tests for solve() and the free fast path."""

    def test_free_lowest_band(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)
        assert sol.energies[0] == pytest.approx(0.5 * float(K_GENERIC @ K_GENERIC))
        np.testing.assert_allclose(sol.pi_hat[:, 0, 0].real, K_GENERIC)

    def test_free_pi_hat_diagonal(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)
        for a in range(3):
            off = sol.pi_hat[a] - np.diag(np.diag(sol.pi_hat[a]))
            assert np.abs(off).max() == 0.0

    def test_ascending_and_hermitian_pi(self) -> None:
        sol = solve(named_potential("cosine3d", 2.0), plane_wave_basis(1), K_GENERIC)
        assert np.all(np.diff(sol.energies) >= 0)
        for a in range(3):
            np.testing.assert_allclose(sol.pi_hat[a], sol.pi_hat[a].conj().T, atol=1e-12)

    def test_eigvecs_unitary(self) -> None:
        sol = solve(named_potential("cosine3d", 1.0), plane_wave_basis(1), K_GENERIC)
        u = sol.eigvecs
        np.testing.assert_allclose(u.conj().T @ u, np.eye(sol.dimension), atol=1e-12)

    def test_constant_shift(self) -> None:
        pot = FourierPotential.from_mapping({(0, 0, 0): 1.5})
        free = solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)
        shifted = solve(pot, plane_wave_basis(1), K_GENERIC)
        np.testing.assert_allclose(shifted.energies, free.energies + 1.5)

    def test_band_arrays_match_solve(self) -> None:
        pot = named_potential("cosine3d", 1.0)
        basis = plane_wave_basis(1)
        kpts = np.array([K_GENERIC, -K_GENERIC, [1.0, -0.5, 2.0]])
        energies, vel = band_arrays(pot, basis, kpts, n_bands=4, velocities=True)
        assert energies.shape == (3, 4)
        assert vel.shape == (3, 4, 3)
        for i, k in enumerate(kpts):
            sol = solve(pot, basis, k)
            np.testing.assert_allclose(energies[i], sol.energies[:4], atol=1e-10)
            np.testing.assert_allclose(vel[i, 0], band_velocity(sol, 1), atol=1e-9)


# ---------------------------------------------------------------------------
# Sum rules
# ---------------------------------------------------------------------------


class TestSumRules:
    """Band velocities and Hessians against finite differences."""

    def test_velocity(self) -> None:
        pot, basis, h = named_potential("cosine3d", 1.0), plane_wave_basis(1), 1e-6
        v = band_velocity(solve(pot, basis, K_GENERIC), 1)
        for a in range(3):
            step = h * np.eye(3)[a]
            fd = (_energy(pot, basis, K_GENERIC + step, 1) - _energy(pot, basis, K_GENERIC - step, 1)) / (2 * h)
            assert v[a] == pytest.approx(fd, rel=1e-6, abs=1e-7)

    def test_hessian(self) -> None:
        pot, basis, h = named_potential("cosine3d", 1.0), plane_wave_basis(1), 1e-4
        sol = solve(pot, basis, K_GENERIC)
        hess = hessian(sol, 1)
        e0 = sol.energies[0]
        eye = np.eye(3)
        for a in range(3):
            plus = _energy(pot, basis, K_GENERIC + h * eye[a], 1)
            minus = _energy(pot, basis, K_GENERIC - h * eye[a], 1)
            assert hess[a, a] == pytest.approx((plus - 2 * e0 + minus) / h ** 2, rel=1e-5)
        pp = _energy(pot, basis, K_GENERIC + h * (eye[0] + eye[1]), 1)
        pm = _energy(pot, basis, K_GENERIC + h * (eye[0] - eye[1]), 1)
        mp = _energy(pot, basis, K_GENERIC + h * (-eye[0] + eye[1]), 1)
        mm = _energy(pot, basis, K_GENERIC - h * (eye[0] + eye[1]), 1)
        fd = (pp - pm - mp + mm) / (4 * h ** 2)
        assert hess[0, 1] == pytest.approx(fd, abs=1e-5)
        assert second_derivative_sum_rule(sol, 1, 1, 2) == hess[0, 1]

    def test_free_hessian_is_identity(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)
        np.testing.assert_allclose(hessian(sol, 1), np.eye(3))

    def test_hessian_symmetric(self) -> None:
        sol = solve(named_potential("cosine3d", 2.0), plane_wave_basis(1), K_GENERIC)
        h = hessian(sol, 1)
        np.testing.assert_allclose(h, h.T, atol=1e-12)


# ---------------------------------------------------------------------------
# Degeneracy and gauge
# ---------------------------------------------------------------------------


class TestDegeneracy:
    """Tests for is_isolated() and the isolation requirement."""

    def test_threshold(self) -> None:
        assert degeneracy_threshold(0.0) == pytest.approx(1e-8)
        assert degeneracy_threshold(-9.0) == pytest.approx(1e-7)

    def test_free_gamma(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), np.zeros(3))
        assert is_isolated(sol, 1)
        assert not is_isolated(sol, 2)

    def test_hessian_refuses_degenerate_band(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), np.zeros(3))
        with pytest.raises(DegeneracyError) as exc_info:
            hessian(sol, 3)
        assert exc_info.value.band == 3
        assert exc_info.value.gap == 0.0

    def test_band_out_of_range(self) -> None:
        sol = solve(FourierPotential(), plane_wave_basis(1), K_GENERIC)
        with pytest.raises(CutoffError):
            hessian(sol, 28)


class TestRephase:
    """Gauge covariance of pi_hat."""

    def test_observables_unchanged(self) -> None:
        sol = solve(named_potential("cosine3d", 2.0), plane_wave_basis(1), K_GENERIC)
        rng = np.random.default_rng(3)
        phases = np.exp(2j * math.pi * rng.random(sol.dimension))
        rotated = rephase(sol, phases)
        np.testing.assert_array_equal(rotated.energies, sol.energies)
        np.testing.assert_allclose(np.abs(rotated.pi_hat), np.abs(sol.pi_hat), atol=1e-13)
        np.testing.assert_allclose(hessian(rotated, 1), hessian(sol, 1), atol=1e-12)

    def test_eigvecs_follow(self) -> None:
        sol = solve(named_potential("cosine3d", 1.0), plane_wave_basis(1), K_GENERIC)
        phases = np.full(sol.dimension, 1j)
        rotated = rephase(sol, phases)
        np.testing.assert_allclose(rotated.eigvecs, 1j * sol.eigvecs)


# ---------------------------------------------------------------------------
# Concurrency
# ---------------------------------------------------------------------------


class TestSolveMany:
    """Tests for solve_many() and solve_async()."""

    def test_threads_do_not_change_results(self) -> None:
        pot, basis = named_potential("cosine3d", 2.0), plane_wave_basis(1)
        kpts = np.random.default_rng(0).uniform(-math.pi, math.pi, size=(6, 3))
        one = solve_many(pot, basis, kpts, threads=1)
        many = solve_many(pot, basis, kpts, threads=4)
        for a, b in zip(one, many):
            np.testing.assert_array_equal(a.energies, b.energies)
            np.testing.assert_array_equal(a.pi_hat, b.pi_hat)

    @pytest.mark.asyncio
    async def test_async_matches_sync(self) -> None:
        pot, basis = named_potential("cosine3d", 1.0), plane_wave_basis(1)
        sol = await solve_async(pot, basis, K_GENERIC)
        np.testing.assert_array_equal(sol.energies, solve(pot, basis, K_GENERIC).energies)
