"""Fiber Hamiltonians h(k) = 1/2 (-i grad + k)^2 + V in a plane-wave basis.

Band indices N and directions alpha are 1-based in every public function,
matching E_1 <= E_2 <= ... and pi_hat(1), pi_hat(2), pi_hat(3).
"""

import asyncio
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from errors import CutoffError, DegeneracyError, EigensolverError
from potential import TWO_PI, FourierPotential

logger = logging.getLogger("bloch_chi.fiber")

DEGENERACY_RTOL = 1e-8
RESIDUAL_TOL = 1e-10
# Upper bound on complex matrix entries held by one batched eigh call.
BATCH_ENTRIES = 1 << 22


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlaneWaveBasis:
    """Plane waves e^{iG.x} with max|n_i| <= cutoff_n, lexicographic order."""

    cutoff_n: int
    vectors: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.vectors)

    @property
    def cartesian(self) -> np.ndarray:
        return TWO_PI * self.vectors.astype(float)


@lru_cache(maxsize=None)
def plane_wave_basis(cutoff_n: int) -> PlaneWaveBasis:
    if cutoff_n < 0:
        raise CutoffError(f"cutoff_n must be non-negative, got {cutoff_n}")
    rng = range(-cutoff_n, cutoff_n + 1)
    vectors = np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)
    vectors.setflags(write=False)
    return PlaneWaveBasis(cutoff_n, vectors)


def degeneracy_threshold(energy: float) -> float:
    return DEGENERACY_RTOL * (1.0 + abs(energy))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _potential_block(pot: FourierPotential, cutoff_n: int) -> np.ndarray:
    vectors = plane_wave_basis(cutoff_n).vectors
    diff = vectors[:, None, :] - vectors[None, :, :]
    block = np.zeros((len(vectors), len(vectors)), dtype=complex)
    for g, v in pot.terms:
        block[np.all(diff == np.asarray(g), axis=-1)] = v
    block.setflags(write=False)
    return block


def potential_matrix(pot: FourierPotential, basis: PlaneWaveBasis) -> np.ndarray:
    """The k-independent part V(G - G') of h(k)."""
    if basis.cutoff_n < pot.support_radius:
        raise CutoffError(
            f"Basis cutoff {basis.cutoff_n} is smaller than the potential support "
            f"radius {pot.support_radius}"
        )
    return _potential_block(pot, basis.cutoff_n)


def _shifted_momenta(basis: PlaneWaveBasis, kpoints: np.ndarray) -> np.ndarray:
    return np.asarray(kpoints, dtype=float)[..., None, :] + basis.cartesian


def assemble(pot: FourierPotential, basis: PlaneWaveBasis, k: Sequence[float]) -> np.ndarray:
    """H[G, G'] = 1/2 |k+G|^2 delta_{G,G'} + V(G - G')."""
    h = potential_matrix(pot, basis).copy()
    q = _shifted_momenta(basis, k)
    h[np.diag_indices_from(h)] += 0.5 * np.einsum("ga,ga->g", q, q)
    return h


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiberSolution:
    """Eigen-decomposition of h(k) and momentum matrix elements.

    ``eigvecs[:, j]`` holds the plane-wave coefficients of u_{j+1} and
    ``pi_hat[a]`` is the matrix of p_{a+1} + k_{a+1} in the eigenbasis.
    """

    k: np.ndarray
    energies: np.ndarray
    eigvecs: np.ndarray
    pi_hat: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.energies)


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude component of each column made real-positive
    idx = np.argmax(np.abs(vecs), axis=-2)
    lead = np.take_along_axis(vecs, idx[..., None, :], axis=-2)
    return vecs * (np.conj(lead) / np.abs(lead))


def _eigh(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        return np.linalg.eigh(h)
    except np.linalg.LinAlgError as e:
        raise EigensolverError(f"Dense Hermitian eigensolver failed: {e}") from e


def solve(pot: FourierPotential, basis: PlaneWaveBasis, k: Sequence[float]) -> FiberSolution:
    """Diagonalize h(k) and build pi_hat in the eigenbasis.

    Raises:
        CutoffError: basis too small for the potential
        EigensolverError: LAPACK failure or residual above 1e-10 (1 + |E|)
    """
    k = np.array(k, dtype=float)
    q = _shifted_momenta(basis, k)
    if pot.is_constant:
        # h(k) is diagonal: plane waves are exact eigenvectors
        potential_matrix(pot, basis)
        diag = 0.5 * np.einsum("ga,ga->g", q, q) + pot.coefficient((0, 0, 0)).real
        order = np.argsort(diag, kind="stable")
        energies = diag[order]
        eigvecs = np.eye(basis.dimension, dtype=complex)[:, order]
        pi_hat = np.stack([np.diag(q[order, a]).astype(complex) for a in range(3)])
        return FiberSolution(k, energies, eigvecs, pi_hat)

    h = assemble(pot, basis, k)
    energies, eigvecs = _eigh(h)
    eigvecs = _fix_phases(eigvecs)
    residual = np.linalg.norm(h @ eigvecs - eigvecs * energies, axis=0)
    worst = np.max(residual / (1.0 + np.abs(energies)))
    if worst > RESIDUAL_TOL:
        raise EigensolverError(
            f"Eigen-residual {worst:.3e} exceeds {RESIDUAL_TOL:.0e} at k={k.tolist()}"
        )
    pi_hat = np.stack(
        [eigvecs.conj().T @ (q[:, a, None] * eigvecs) for a in range(3)]
    )
    return FiberSolution(k, energies, eigvecs, pi_hat)


def band_arrays(
    pot: FourierPotential,
    basis: PlaneWaveBasis,
    kpoints: np.ndarray,
    n_bands: Optional[int] = None,
    velocities: bool = False,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Energies (and pi_hat diagonals) for many k with batched eigh.

    Returns arrays of shape (nk, n_bands) and (nk, n_bands, 3).
    """
    kpoints = np.atleast_2d(np.asarray(kpoints, dtype=float))
    n_bands = basis.dimension if n_bands is None else min(n_bands, basis.dimension)
    q = _shifted_momenta(basis, kpoints)
    kinetic = 0.5 * np.einsum("kga,kga->kg", q, q)
    if pot.is_constant:
        potential_matrix(pot, basis)
        order = np.argsort(kinetic, axis=1, kind="stable")[:, :n_bands]
        energies = np.take_along_axis(kinetic, order, axis=1) + pot.coefficient((0, 0, 0)).real
        vel = np.take_along_axis(q, order[..., None], axis=1) if velocities else None
        return energies, vel

    block = potential_matrix(pot, basis)
    h = np.broadcast_to(block, (len(kpoints),) + block.shape).copy()
    idx = np.arange(basis.dimension)
    h[:, idx, idx] += kinetic
    energies, vecs = _eigh(h)
    vel = None
    if velocities:
        weights = np.abs(vecs[:, :, :n_bands]) ** 2
        vel = np.einsum("kgj,kga->kja", weights, q)
    return energies[:, :n_bands], vel


def chunk_size(basis: PlaneWaveBasis) -> int:
    return max(1, BATCH_ENTRIES // (basis.dimension * basis.dimension))


async def solve_async(pot: FourierPotential, basis: PlaneWaveBasis, k: Sequence[float]) -> FiberSolution:
    """Async version of solve, run in a worker thread."""
    return await asyncio.to_thread(solve, pot, basis, k)


async def solve_many_async(
    pot: FourierPotential,
    basis: PlaneWaveBasis,
    kpoints: Sequence[Sequence[float]],
    threads: int = 1,
) -> list[FiberSolution]:
    semaphore = asyncio.Semaphore(max(1, threads))

    async def _one(k):
        async with semaphore:
            return await solve_async(pot, basis, k)

    return list(await asyncio.gather(*(_one(k) for k in kpoints)))


def solve_many(pot, basis, kpoints, threads: int = 1) -> list[FiberSolution]:
    return asyncio.run(solve_many_async(pot, basis, kpoints, threads))


# ---------------------------------------------------------------------------
# Derived quantities
# ---------------------------------------------------------------------------


def rephase(sol: FiberSolution, phases: Sequence[complex]) -> FiberSolution:
    """Multiply eigenvector columns by unit phases; pi_hat follows."""
    phases = np.asarray(phases, dtype=complex)
    pi_hat = np.conj(phases)[None, :, None] * sol.pi_hat * phases[None, None, :]
    return FiberSolution(sol.k, sol.energies, sol.eigvecs * phases, pi_hat)


def is_isolated(sol: FiberSolution, band: int) -> bool:
    e = sol.energies
    i = band - 1
    tol = degeneracy_threshold(e[i])
    below = i == 0 or e[i] - e[i - 1] > tol
    above = i == len(e) - 1 or e[i + 1] - e[i] > tol
    return below and above


def _require_isolated(sol: FiberSolution, band: int) -> None:
    if not 1 <= band <= sol.dimension:
        raise CutoffError(f"Band {band} outside 1..{sol.dimension}")
    if not is_isolated(sol, band):
        e = sol.energies
        gaps = np.abs(np.delete(e, band - 1) - e[band - 1])
        raise DegeneracyError(
            f"Band {band} is degenerate at k={sol.k.tolist()}",
            band=band,
            k=sol.k,
            gap=float(gaps.min()),
        )


def band_velocity(sol: FiberSolution, band: int) -> np.ndarray:
    """Gradient of E_N from the diagonal momentum elements."""
    return sol.pi_hat[:, band - 1, band - 1].real.copy()


def second_derivative_sum_rule(sol: FiberSolution, band: int, i: int, j: int) -> float:
    """d^2 E_N / dk_i dk_j = delta_ij + 2 sum_m Re(pi_mN(i) pi_Nm(j)) / (E_N - E_m)."""
    return float(hessian(sol, band)[i - 1, j - 1])


def hessian(sol: FiberSolution, band: int) -> np.ndarray:
    _require_isolated(sol, band)
    n = band - 1
    denom = sol.energies[n] - sol.energies
    denom[n] = np.inf
    col = sol.pi_hat[:, :, n]  # pi_mN(alpha)
    row = sol.pi_hat[:, n, :]  # pi_Nm(alpha)
    terms = np.einsum("am,bm->abm", col, row).real / denom
    return np.eye(3) + 2.0 * terms.sum(axis=-1)
