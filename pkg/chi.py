"""Orbital susceptibility at fixed density.

With f the Fermi log-kernel, the finite-temperature susceptibility is

    chi(beta, rho0) = -(1 / 2 beta) (2 pi)^-3 int dk sum_j sum_l f^(l)(E_j(k)) c_{j,l}(k)

The coefficient functions c_{j,l} = a_{j,l} + b_{j,l} come from two trace
reductions. a collects the quadruple sum of C4 terms against
(E_j1 - xi)^-2 (E_j2 - xi)^-1 (E_j3 - xi)^-1 (E_j4 - xi)^-1. b collects
minus the pure (E_j1 - xi)^-3 term plus the double sum of C2 terms
against (E_j1 - xi)^-3 (E_j2 - xi)^-1. Residues at the pole of band j,
split by the order l of the f-derivative they multiply, give c_{j,l}
(see residue.residue_weights_batch). The l = 2, 3 buckets also have
closed forms (explicit_coeffs), which give an independent check.

Zero-temperature limits:
    semiconductor  chi_SC = 1/2 <sum_{j<=N} c_{j,1} + (E_j - E_F) c_{j,0}>
    metal          chi_M  = -(1/12)(2 pi)^-3 [S - 6 V]
with S the Fermi-surface integral of (Hessian minor - 3 F_N) / |grad E_N|,
F_N = -2 a_{N,2}, and V the occupied-volume integral of the same
bracket as the semiconductor formula.
"""

import asyncio
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field

from bz import BandData, ThermoState, band_data, density, fermi_derivatives
from cache import EigenCache
from errors import ClassificationError, CutoffError, DegeneracyError, QuadratureError
from fermi import classify, solve_mu, tetrahedron_ids_inverse
from fiber import (
    FiberSolution,
    _require_isolated,
    assemble,
    degeneracy_threshold,
    hessian,
    is_isolated,
    rephase,
    solve,
)
from potential import TWO_PI
from residue import TAIL, _panels, complex_fermi_log, residue_weights_batch
from surface import TetraMesh, isolation_check, surface_integral

logger = logging.getLogger("bloch_chi.chi")

PRUNE_RTOL = 1e-16
ASSEMBLY_RTOL = 1e-12
DEGENERATE_FRACTION = 0.01
ORACLE_NODES = 16
ORACLE_RTOL = 1e-8
N_ORDERS = 5  # residue buckets l = 0..4


# ---------------------------------------------------------------------------
# Coefficient tensors
# ---------------------------------------------------------------------------


def _commutator_factors(sol: FiberSolution, cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    # X[a,b,c] = p1_ab p2_bc - p2_ab p1_bc ; Y[c,d,a] = p2_cd p1_da - p1_cd p2_da
    p1 = sol.pi_hat[0, :cutoff, :cutoff]
    p2 = sol.pi_hat[1, :cutoff, :cutoff]
    x = np.einsum("ab,bc->abc", p1, p2) - np.einsum("ab,bc->abc", p2, p1)
    y = np.einsum("cd,da->cda", p2, p1) - np.einsum("cd,da->cda", p1, p2)
    return x, y


def c4_tensor(sol: FiberSolution, cutoff: int) -> np.ndarray:
    """C_{j1 j2 j3 j4} for all indices below the band cutoff (0-based axes)."""
    x, y = _commutator_factors(sol, cutoff)
    return np.einsum("abc,cda->abcd", x, y)


def coeff_C4(sol: FiberSolution, j1: int, j2: int, j3: int, j4: int) -> complex:
    p1, p2 = sol.pi_hat[0], sol.pi_hat[1]
    a, b, c, d = j1 - 1, j2 - 1, j3 - 1, j4 - 1
    left = p1[a, b] * p2[b, c] - p2[a, b] * p1[b, c]
    right = p2[c, d] * p1[d, a] - p1[c, d] * p2[d, a]
    return complex(left * right)


def c2_matrix(sol: FiberSolution, cutoff: int) -> np.ndarray:
    p = sol.pi_hat[:2, :cutoff, :cutoff]
    return np.sum(np.abs(p) ** 2, axis=0)


def coeff_C2(sol: FiberSolution, j1: int, j2: int) -> float:
    p = sol.pi_hat[:2, j1 - 1, j2 - 1]
    return float(np.sum(np.abs(p) ** 2))


def _check_cutoff(sol: FiberSolution, cutoff: int) -> None:
    if not 1 <= cutoff <= sol.dimension:
        raise CutoffError(f"Band cutoff J={cutoff} outside 1..{sol.dimension}")


def _tail_bounds(sol: FiberSolution, cutoff: int) -> np.ndarray:
    m = sol.dimension
    if cutoff >= m:
        return np.zeros(cutoff)
    tail = np.abs(sol.pi_hat[:2, :cutoff, cutoff:]).max(axis=(0, 2)) ** 4
    gap = sol.energies[cutoff - 1] - sol.energies[:cutoff]
    with np.errstate(divide="ignore"):
        return np.where(gap > 0, tail * (m - cutoff) / gap ** 2, np.inf)


# ---------------------------------------------------------------------------
# Explicit coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChiCoefficients:
    """c_{j1,l}, a_{j1,l}, b_{j1,l} for l = 0..3 at one k (NaN when unknown)."""

    band: int
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    band_cutoff: int
    tail_bound: float
    imag_residue: float = 0.0
    l4_bucket: float = 0.0


def explicit_coeffs(sol: FiberSolution, j1: int, cutoff: int) -> ChiCoefficients:
    """Closed-form a, b, c for l = 2, 3 and b for l = 0, 1.

    Raises:
        DegeneracyError: E_j1 not isolated from the other bands below the cutoff
    """
    _check_cutoff(sol, cutoff)
    if j1 > cutoff:
        raise CutoffError(f"Band {j1} above the band cutoff J={cutoff}")
    n = j1 - 1
    e = sol.energies[:cutoff]
    tol = degeneracy_threshold(e[n])
    d = e - e[n]
    if np.any(np.abs(np.delete(d, n)) <= tol):
        raise DegeneracyError(
            f"Band {j1} is degenerate at k={sol.k.tolist()}; use the residue path",
            band=j1,
            k=sol.k,
            gap=float(np.abs(np.delete(d, n)).min()),
        )
    others = np.arange(cutoff) != n
    inv = np.zeros(cutoff)
    inv[others] = 1.0 / d[others]

    p1 = sol.pi_hat[0, :cutoff, :cutoff]
    p2 = sol.pi_hat[1, :cutoff, :cutoff]
    p1nn, p2nn = p1[n, n].real, p2[n, n].real
    c2 = c2_matrix(sol, cutoff)[n]

    s1 = np.sum(np.abs(p1[n]) ** 2 * inv)
    s2 = np.sum(np.abs(p2[n]) ** 2 * inv)
    s12 = np.sum(2.0 * (p2[n] * p1[:, n]).real * inv)
    a3 = (p1nn ** 2 * s2 + p2nn ** 2 * s1 - p1nn * p2nn * s12) / 6.0
    c3 = (p1nn ** 2 * (1.0 + s2) + p2nn ** 2 * (1.0 + s1) - p1nn * p2nn * s12) / 6.0

    x, y = _commutator_factors(sol, cutoff)
    c_nn_jk = x[n, n, :, None] * y[:, :, n]          # C_{n,n,j,k}
    c_nj_nk = x[n, :, n, None] * y[n, None, :, n]    # C_{n,j,n,k}
    c_nj_kn = x[n] * y[:, n, n][None, :]             # C_{n,j,k,n}
    c_jnnn = x[:, n, n] * y[n, n, :]                 # C_{j,n,n,n}
    c_nnjn = x[n, n, :] * y[:, n, n]                 # C_{n,n,j,n}
    double = np.einsum("jk,j,k->", c_nn_jk + c_nj_nk + c_nj_kn, inv, inv)
    single = np.sum((c_jnnn - c_nnjn) * inv ** 2)
    a2_complex = -0.5 * (double + single)
    b2 = -0.5 * np.sum(c2 * inv) + 0.5
    c2_complex = -0.5 * (np.sum(c2 * inv) - 1.0 + single + double)

    b = np.array([-2.0 * np.sum(c2 * inv ** 3), -np.sum(c2 * inv ** 2), b2, (p1nn ** 2 + p2nn ** 2) / 6.0])
    a = np.array([np.nan, np.nan, a2_complex.real, a3])
    c = np.array([np.nan, np.nan, c2_complex.real, c3])
    return ChiCoefficients(
        band=j1,
        c=c,
        a=a,
        b=b,
        band_cutoff=cutoff,
        tail_bound=float(_tail_bounds(sol, cutoff)[n]),
        imag_residue=float(max(abs(a2_complex.imag), abs(c2_complex.imag))),
    )


def f_coefficient(sol: FiberSolution, band: int, cutoff: int) -> float:
    """F_N = -2 a_{N,2}."""
    return -2.0 * float(explicit_coeffs(sol, band, cutoff).a[2])


def hessian_minor(sol: FiberSolution, band: int) -> float:
    h = hessian(sol, band)
    return float(h[0, 0] * h[1, 1] - h[0, 1] ** 2)


# ---------------------------------------------------------------------------
# Coefficients through the residue engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Residue buckets for every band below the cutoff at one k.

    ``a[j, l]`` and ``b[j, l]`` are the l-th derivative buckets of the two
    trace reductions at band j+1, l = 0..4. Merged clusters share their
    buckets equally and carry the cluster energy in ``pole_energies``.
    """

    k: np.ndarray
    energies: np.ndarray
    pole_energies: np.ndarray
    a: np.ndarray
    b: np.ndarray
    band_cutoff: int
    tail_bounds: np.ndarray
    imag_residue: float
    merged_bands: int
    direct_trace: Optional[float] = None

    @property
    def c(self) -> np.ndarray:
        return self.a + self.b

    @property
    def l4_bucket(self) -> float:
        return float(np.abs(self.c[:, 4]).max())

    def coefficients(self, j1: int) -> ChiCoefficients:
        i = j1 - 1
        return ChiCoefficients(
            band=j1,
            c=self.c[i, :4].copy(),
            a=self.a[i, :4].copy(),
            b=self.b[i, :4].copy(),
            band_cutoff=self.band_cutoff,
            tail_bound=float(self.tail_bounds[i]),
            imag_residue=self.imag_residue,
            l4_bucket=float(self.c[i, 4]),
        )

    def trace_value(self, state: ThermoState) -> float:
        """sum_j sum_l f^(l)(E_j) c_{j,l}."""
        derivs = fermi_derivatives(state, self.pole_energies, N_ORDERS - 1)
        return float(np.sum(self.c.T * derivs))


def _clusters(energies: np.ndarray, eps: Optional[float]):
    tol = np.array([degeneracy_threshold(e) if eps is None else eps for e in energies])
    new = np.ones(len(energies), dtype=bool)
    new[1:] = np.diff(energies) > tol[1:]
    labels = np.cumsum(new) - 1
    sizes = np.bincount(labels)
    centres = np.bincount(labels, weights=energies) / sizes
    return labels, centres, sizes


def _accumulate(
    coeff: np.ndarray,
    labels: np.ndarray,
    base_mults: Sequence[int],
    centres: np.ndarray,
    buckets: np.ndarray,
    state: Optional[ThermoState],
) -> complex:
    """Add coeff * residue weights of prod_p (E_{label_p} - xi)^{-m_p} into buckets.

    Terms are grouped by which positions share a pole cluster, so each group
    has one multiplicity pattern and is handled by one batched call.
    Returns sum of coeff * contour value when a state is given.
    """
    count, npos = labels.shape
    if count == 0:
        return 0j
    pairs = list(itertools.combinations(range(npos), 2))
    code = np.zeros(count, dtype=np.int64)
    for bit, (p, q) in enumerate(pairs):
        code |= (labels[:, p] == labels[:, q]).astype(np.int64) << bit
    direct = 0j
    n_clusters = len(centres)
    for value in np.unique(code):
        rows = np.nonzero(code == value)[0]
        rep = list(range(npos))
        for bit, (p, q) in enumerate(pairs):
            if value >> bit & 1:
                rep[q] = min(rep[q], p)
        blocks = sorted(set(rep))
        mults = tuple(sum(base_mults[i] for i in range(npos) if rep[i] == blk) for blk in blocks)
        poles = labels[rows][:, blocks]
        energies = centres[poles]
        c = coeff[rows]
        for p, w in enumerate(residue_weights_batch(energies, mults)):
            contrib = c[:, None] * w
            for l in range(w.shape[1]):
                buckets[:, l] += np.bincount(poles[:, p], weights=contrib[:, l].real, minlength=n_clusters)
                buckets[:, l] += 1j * np.bincount(poles[:, p], weights=contrib[:, l].imag, minlength=n_clusters)
            if state is not None:
                derivs = fermi_derivatives(state, energies[:, p], mults[p] - 1)
                direct += np.sum(contrib * derivs.T)
    return direct


def coeffs_via_residues(
    sol: FiberSolution,
    cutoff: int,
    state: Optional[ThermoState] = None,
    merge_eps: Optional[float] = None,
) -> CoefficientTable:
    """All c_{j,l}, j <= J, l <= 4, from residues of the two trace reductions.

    When ``state`` is given the table also records the directly summed
    trace (sum of coefficient times contour value over all terms).
    """
    _check_cutoff(sol, cutoff)
    e = sol.energies[:cutoff]
    labels, centres, sizes = _clusters(e, merge_eps)
    n_clusters = len(centres)

    c4 = c4_tensor(sol, cutoff)
    scale = float(np.abs(c4).max())
    idx4 = np.nonzero(np.abs(c4) > PRUNE_RTOL * scale) if scale > 0 else (np.array([], int),) * 4
    quad = np.zeros((n_clusters, N_ORDERS), dtype=complex)
    direct_a = _accumulate(c4[idx4], labels[np.stack(idx4, axis=1)], (2, 1, 1, 1), centres, quad, state)

    triple = np.zeros((n_clusters, N_ORDERS), dtype=complex)
    direct_t = _accumulate(np.ones(cutoff, dtype=complex), labels[:, None], (3,), centres, triple, state)

    c2 = c2_matrix(sol, cutoff)
    scale2 = float(c2.max())
    idx2 = np.nonzero(c2 > PRUNE_RTOL * scale2) if scale2 > 0 else (np.array([], int),) * 2
    double = np.zeros((n_clusters, N_ORDERS), dtype=complex)
    direct_g = _accumulate(
        c2[idx2].astype(complex), labels[np.stack(idx2, axis=1)], (3, 1), centres, double, state
    )

    a_cl = quad
    b_cl = double - triple
    imag = float(max(np.abs(a_cl.imag).max(), np.abs(b_cl.imag).max()))
    share = sizes[labels][:, None]
    merged = int(np.count_nonzero(sizes[labels] > 1))
    if merged:
        logger.debug("Merged %d near-degenerate bands at k=%s", merged, sol.k.tolist())
    direct = None
    if state is not None:
        direct = float((direct_a - (direct_t - direct_g)).real)
    return CoefficientTable(
        k=sol.k,
        energies=e.copy(),
        pole_energies=centres[labels],
        a=a_cl.real[labels] / share,
        b=b_cl.real[labels] / share,
        band_cutoff=cutoff,
        tail_bounds=_tail_bounds(sol, cutoff),
        imag_residue=imag,
        merged_bands=merged,
        direct_trace=direct,
    )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


class ChiResult(BaseModel):
    """Susceptibility in units of (e/c)^2, spinless."""

    model_config = ConfigDict(frozen=True)
    kind: Literal["finite_T", "zero_T_SC", "zero_T_metal", "matrix_oracle"]
    value: float
    spinful_value: float = Field(..., description="2 x value, spin degeneracy restored")
    prefactor: str = "(e/c)^2"
    beta: Optional[float] = None
    zero_temperature: bool = False
    rho0: Optional[float] = None
    mu: Optional[float] = None
    fermi_energy: Optional[float] = None
    band: Optional[int] = None
    surface_term: Optional[float] = None
    volume_term: Optional[float] = None
    band_terms: Optional[list[float]] = None
    grid: int
    grid_shift: bool
    cutoff_n: int
    band_cutoff: Optional[int] = None
    tail_bound: float = 0.0
    imag_residue: float = 0.0
    merged_points: int = 0
    diagnostics: dict[str, float] = Field(default_factory=dict)


def default_band_cutoff(bands: BandData, occupied: int) -> int:
    return int(min(bands.capacity, max(3, 3 * occupied)))


# ---------------------------------------------------------------------------
# Per-k plumbing
# ---------------------------------------------------------------------------


def grid_solution(
    bands: BandData,
    index: int,
    cache: Optional[EigenCache] = None,
    phase_seed: Optional[int] = None,
) -> FiberSolution:
    """Full fiber solution at grid point ``index``, through the cache."""
    sol = None
    if cache is not None:
        sol = cache.load_fiber(bands.pot, bands.basis, bands.grid.key, index)
    if sol is None:
        sol = solve(bands.pot, bands.basis, bands.grid.points[index])
        if cache is not None:
            cache.store_fiber(bands.pot, bands.basis, bands.grid.key, index, sol)
    if phase_seed is not None:
        rng = np.random.default_rng([phase_seed, index])
        sol = rephase(sol, np.exp(2j * math.pi * rng.random(sol.dimension)))
    return sol


async def _map_points(func: Callable[[int], object], indices: Sequence[int], threads: int) -> list:
    semaphore = asyncio.Semaphore(max(1, threads))

    async def _one(i):
        async with semaphore:
            return await asyncio.to_thread(func, int(i))

    return list(await asyncio.gather(*(_one(i) for i in indices)))


def map_points(func, indices, threads: int = 1) -> list:
    """Evaluate func at each grid index in worker threads; results in order."""
    return asyncio.run(_map_points(func, indices, threads))


def _resolve_state(bands: BandData, beta: float, rho0: Optional[float], mu: Optional[float]):
    if (rho0 is None) == (mu is None):
        raise ValueError("Exactly one of rho0 and mu must be given")
    if mu is None:
        mu = solve_mu(bands, beta, rho0)
    else:
        rho0 = density(bands, ThermoState(beta, mu))
    return ThermoState(beta, mu), rho0


# ---------------------------------------------------------------------------
# Finite temperature
# ---------------------------------------------------------------------------


def chi_finite_T(
    bands: BandData,
    beta: float,
    rho0: Optional[float] = None,
    band_cutoff: Optional[int] = None,
    mu: Optional[float] = None,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
    phase_seed: Optional[int] = None,
    merge_eps: Optional[float] = None,
) -> ChiResult:
    """chi(beta, rho0) from residue coefficients, at fixed density or fixed mu."""
    state, rho0 = _resolve_state(bands, beta, rho0, mu)
    cutoff = band_cutoff or default_band_cutoff(bands, max(1, math.ceil(rho0 - 1e-9)))

    def _point(index: int):
        sol = grid_solution(bands, index, cache, phase_seed)
        table = coeffs_via_residues(sol, cutoff, state, merge_eps)
        value = table.trace_value(state)
        derivs = fermi_derivatives(state, table.pole_energies, N_ORDERS - 1)
        scale = 1.0 + float(np.sum(np.abs(table.c.T * derivs)))
        mismatch = abs(value - table.direct_trace) / scale
        return value, mismatch, table.imag_residue, table.merged_bands, float(table.tail_bounds.max())

    rows = map_points(_point, range(bands.grid.size), threads)
    values = np.array([r[0] for r in rows])
    mismatch = max(r[1] for r in rows)
    if mismatch > ASSEMBLY_RTOL:
        logger.warning("Bucket and direct trace assemblies differ by %.3e", mismatch)
    value = -float(np.sum(values)) * bands.grid.weight / (2.0 * beta)
    logger.info("chi(beta=%g, rho0=%g) = %.12g", beta, rho0, value)
    return ChiResult(
        kind="finite_T",
        value=value,
        spinful_value=2.0 * value,
        beta=beta,
        rho0=rho0,
        mu=state.mu,
        grid=bands.grid.n_per_axis,
        grid_shift=bands.grid.shift,
        cutoff_n=bands.basis.cutoff_n,
        band_cutoff=cutoff,
        tail_bound=max(r[4] for r in rows),
        imag_residue=max(r[2] for r in rows),
        merged_points=sum(1 for r in rows if r[3]),
        diagnostics={"assembly_mismatch": mismatch},
    )


# ---------------------------------------------------------------------------
# Matrix contour oracle
# ---------------------------------------------------------------------------


def _resolvent_traces(h: np.ndarray, q: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """T1 + T2 at each node: T1 = -Tr[K K R], T2 = Tr[(X1 X1 + X2 X2 - R) R R]."""
    m = h.shape[0]
    r = np.linalg.inv(h[None, :, :] - xi[:, None, None] * np.eye(m)[None])
    x1 = r * q[None, None, :, 0]
    x2 = r * q[None, None, :, 1]
    k = x1 @ x2 - x2 @ x1
    rr = r @ r
    t1 = -np.einsum("nij,nji->n", k @ k, r)
    t2 = np.einsum("nij,nji->n", x1 @ x1 + x2 @ x2 - r, rr)
    return t1 + t2


def _oracle_point(h, q, state: ThermoState, floor: float, nodes: int) -> float:
    eta = math.pi / (2.0 * state.beta)
    delta = floor - 1.0
    levels = np.linalg.eigvalsh(h)
    right = max(state.mu, delta + 1.0) + TAIL / state.beta + 1.0
    gx, gw = leggauss(nodes)
    xs, ws = [], []
    for a, b in _panels(delta, right, [*levels[levels < right], state.mu], eta):
        xs.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * gw)
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    top = x + 1j * eta
    horizontal = np.sum(w * (complex_fermi_log(state, top) * _resolvent_traces(h, q, top)).imag)
    y = 0.5 * eta * (gx + 1.0)
    left = delta + 1j * y
    vertical = np.sum(0.5 * eta * gw * (complex_fermi_log(state, left) * _resolvent_traces(h, q, left)).real)
    contour = -(horizontal + vertical) / math.pi
    return -contour / (2.0 * state.beta)


def matrix_contour_oracle(
    bands: BandData,
    beta: float,
    rho0: Optional[float] = None,
    mu: Optional[float] = None,
    nodes: int = ORACLE_NODES,
    check: bool = True,
    threads: int = 1,
) -> ChiResult:
    """chi from resolvent traces integrated along the contour (test oracle).

    Raises:
        QuadratureError: doubling the nodes moves the result by more than 1e-8 relative
    """
    state, rho0 = _resolve_state(bands, beta, rho0, mu)
    floor = bands.energy_floor

    def _point(index: int, count: int) -> float:
        k = bands.grid.points[index]
        h = assemble(bands.pot, bands.basis, k)
        q = k + bands.basis.cartesian
        return _oracle_point(h, q, state, floor, count)

    def _total(count: int) -> float:
        values = map_points(lambda i: _point(i, count), range(bands.grid.size), threads)
        return float(np.sum(values)) * bands.grid.weight

    value = _total(nodes)
    diagnostics = {}
    if check:
        refined = _total(2 * nodes)
        change = abs(refined - value) / max(abs(refined), 1e-300)
        diagnostics["node_doubling_change"] = change
        if change > ORACLE_RTOL:
            raise QuadratureError(
                f"Matrix contour oracle not converged: relative change {change:.3e}", change
            )
        value = refined
    return ChiResult(
        kind="matrix_oracle",
        value=value,
        spinful_value=2.0 * value,
        beta=beta,
        rho0=rho0,
        mu=state.mu,
        grid=bands.grid.n_per_axis,
        grid_shift=bands.grid.shift,
        cutoff_n=bands.basis.cutoff_n,
        band_cutoff=bands.basis.dimension,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Zero temperature
# ---------------------------------------------------------------------------


def _occupied_terms(table: CoefficientTable, filled: int, level: float, step: bool) -> np.ndarray:
    e = table.energies[:filled]
    terms = table.c[:filled, 1] + (e - level) * table.c[:filled, 0]
    if step:
        terms = np.where(e <= level, terms, 0.0)
    return terms


def chi_zero_T_SC(
    bands: BandData,
    rho0: float,
    band_cutoff: Optional[int] = None,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
) -> ChiResult:
    """chi_SC = 1/2 <sum_{j<=N} c_{j,1} + (E_j - E_F) c_{j,0}>."""
    cls = classify(bands, rho0)
    if cls.variant != "SC":
        raise ClassificationError(f"chi_zero_T_SC needs a semiconductor, got {cls.variant}")
    filled, level = cls.band, cls.fermi_energy
    cutoff = band_cutoff or default_band_cutoff(bands, filled)
    if cutoff < filled:
        raise CutoffError(f"Band cutoff {cutoff} below the number of filled bands {filled}")

    def _point(index: int):
        table = coeffs_via_residues(grid_solution(bands, index, cache), cutoff)
        return (
            _occupied_terms(table, filled, level, step=False),
            float(table.tail_bounds[:filled].max()),
            table.merged_bands,
            table.imag_residue,
        )

    rows = map_points(_point, range(bands.grid.size), threads)
    per_band = np.sum(np.stack([r[0] for r in rows]), axis=0) * bands.grid.weight * 0.5
    value = float(np.sum(per_band))
    logger.info("chi_SC(rho0=%g) = %.12g", rho0, value)
    return ChiResult(
        kind="zero_T_SC",
        value=value,
        spinful_value=2.0 * value,
        zero_temperature=True,
        rho0=rho0,
        fermi_energy=level,
        band=filled,
        band_terms=per_band.tolist(),
        grid=bands.grid.n_per_axis,
        grid_shift=bands.grid.shift,
        cutoff_n=bands.basis.cutoff_n,
        band_cutoff=cutoff,
        tail_bound=max(r[1] for r in rows),
        imag_residue=max(r[3] for r in rows),
        merged_points=sum(1 for r in rows if r[2]),
        diagnostics={"gap": cls.gap},
    )


def chi_zero_T_metal(
    bands: BandData,
    rho0: float,
    band_cutoff: Optional[int] = None,
    margin: Optional[float] = None,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
) -> ChiResult:
    """chi_M = -(1/12)(2 pi)^-3 [surface_term - 6 volume_term].

    Raises:
        ClassificationError: not a metal, or E_F too close to bands N-1 / N+1
        DegeneracyError: band N degenerate on more than 1% of surface vertices
    """
    cls = classify(bands, rho0)
    if cls.variant != "Metal":
        raise ClassificationError(f"chi_zero_T_metal needs a metal, got {cls.variant}")
    band, level = cls.band, cls.fermi_energy
    cutoff = band_cutoff or default_band_cutoff(bands, band)
    if cutoff < band:
        raise CutoffError(f"Band cutoff {cutoff} below the Fermi band {band}")

    if bands.velocities is None:
        bands = band_data(
            bands.pot, bands.basis, bands.grid, bands.n_bands, velocities=True, threads=threads, cache=cache
        )
    isolation = isolation_check(bands, band, level, **({"margin": margin} if margin else {}))
    if not isolation.ok:
        raise ClassificationError(
            f"Fermi level not isolated from neighbouring bands (d1={isolation.d1:.3e}, d2={isolation.d2:.3e})",
            isolation.model_dump(),
        )

    # the isolevel of the uncorrected interpolant that encloses exactly rho0
    surface_level = tetrahedron_ids_inverse(bands, rho0, corrected=False)
    mesh = TetraMesh.from_band(bands.grid, bands.band(band), bands.velocities[:, band - 1])
    vertices = mesh.crossing_vertices(surface_level)

    def _vertex(index: int):
        sol = grid_solution(bands, index, cache)
        if not is_isolated(sol, band):
            return None
        return hessian_minor(sol, band) + 6.0 * float(explicit_coeffs(sol, band, cutoff).a[2])

    samples = map_points(_vertex, vertices, threads)
    degenerate = sum(1 for s in samples if s is None)
    if vertices.size and degenerate > DEGENERATE_FRACTION * vertices.size:
        raise DegeneracyError(
            f"Band {band} degenerate at {degenerate} of {vertices.size} Fermi-surface vertices", band=band
        )
    values = np.zeros(bands.grid.size)
    values[vertices] = [0.0 if s is None else s for s in samples]
    surface = surface_integral(mesh, surface_level, values)

    occupied = np.nonzero((bands.energies[:, :band] <= level).any(axis=1))[0]

    def _volume(index: int):
        table = coeffs_via_residues(grid_solution(bands, index, cache), cutoff)
        return float(np.sum(_occupied_terms(table, band, level, step=True))), table.merged_bands

    rows = map_points(_volume, occupied, threads)
    volume = TWO_PI ** 3 * bands.grid.weight * float(np.sum([r[0] for r in rows]))
    value = -(surface.value - 6.0 * volume) / (12.0 * TWO_PI ** 3)
    logger.info("chi_M(rho0=%g) = %.12g (surface %.6g, volume %.6g)", rho0, value, surface.value, volume)
    return ChiResult(
        kind="zero_T_metal",
        value=value,
        spinful_value=2.0 * value,
        zero_temperature=True,
        rho0=rho0,
        fermi_energy=level,
        band=band,
        surface_term=surface.value,
        volume_term=volume,
        grid=bands.grid.n_per_axis,
        grid_shift=bands.grid.shift,
        cutoff_n=bands.basis.cutoff_n,
        band_cutoff=cutoff,
        merged_points=sum(1 for r in rows if r[1]),
        diagnostics={
            "surface_level": surface_level,
            "d1": isolation.d1,
            "d2": isolation.d2,
            "crossing_tetrahedra": float(surface.crossing_tetrahedra),
            "degenerate_vertices": float(degenerate),
        },
    )


def integration_by_parts_residual(
    bands: BandData,
    beta: float,
    rho0: float,
    band: int,
    band_cutoff: Optional[int] = None,
    threads: int = 1,
) -> tuple[float, float]:
    """Both sides of <f''' c_{N,3} + f'' c_{N,2}> = <f'' (minor / 6 + a_{N,2})>.

    Only points with |E_N - mu| < TAIL / beta contribute; the rest are
    exponentially small on both sides.
    """
    mu = solve_mu(bands, beta, rho0)
    state = ThermoState(beta, mu)
    cutoff = band_cutoff or default_band_cutoff(bands, band)
    near = np.nonzero(np.abs(bands.band(band) - mu) < TAIL / beta)[0]

    def _point(index: int):
        sol = grid_solution(bands, index)
        _require_isolated(sol, band)
        coeffs = explicit_coeffs(sol, band, cutoff)
        f = fermi_derivatives(state, sol.energies[band - 1], 3)
        lhs = f[3] * coeffs.c[3] + f[2] * coeffs.c[2]
        rhs = f[2] * (hessian_minor(sol, band) / 6.0 + coeffs.a[2])
        return lhs, rhs

    rows = map_points(_point, near, threads)
    lhs = float(np.sum([r[0] for r in rows])) * bands.grid.weight
    rhs = float(np.sum([r[1] for r in rows])) * bands.grid.weight
    return lhs, rhs
