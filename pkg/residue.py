"""Contour integrals of the Fermi log-kernel against rational functions.

    I = (1/2 pi i) \\oint_Gamma f(xi) prod_p (E_p - xi)^{-m_p} d xi

with Gamma the positively oriented boundary of the half-strip
{Re xi > delta, |Im xi| < pi / (2 beta)}. By residues

    I = sum_p sum_{l < m_p} w_{p,l} f^{(l)}(E_p)

where the weights w_{p,l} are rational in the pole energies and do not
depend on beta or mu. They are what the susceptibility module collects
into its coefficient functions.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate

from bz import MAX_DERIVATIVE_ORDER, ThermoState, fermi_derivatives
from errors import QuadratureError, ResidueOrderError

logger = logging.getLogger("bloch_chi.residue")

MAX_TOTAL_MULTIPLICITY = 8
ORACLE_TOL = 1e-11
# |f| < 1e-16 beyond mu + TAIL / beta
TAIL = 40.0


@dataclass(frozen=True)
class Pole:
    energy: float
    multiplicity: int


@dataclass(frozen=True)
class PoleSpec:
    poles: tuple[Pole, ...]

    def __post_init__(self):
        if not self.poles:
            raise ValueError("PoleSpec needs at least one pole")
        for p in self.poles:
            if p.multiplicity < 1:
                raise ValueError(f"Pole multiplicity must be positive, got {p.multiplicity}")
            if not math.isfinite(p.energy):
                raise ValueError(f"Pole energy must be finite real, got {p.energy}")
        if self.total_multiplicity > MAX_TOTAL_MULTIPLICITY:
            raise ValueError(
                f"Total multiplicity {self.total_multiplicity} exceeds {MAX_TOTAL_MULTIPLICITY}"
            )

    @classmethod
    def of(cls, pairs: Iterable[tuple[float, int]]) -> "PoleSpec":
        return cls(tuple(Pole(float(e), int(m)) for e, m in pairs))

    @property
    def energies(self) -> np.ndarray:
        return np.array([p.energy for p in self.poles])

    @property
    def multiplicities(self) -> tuple[int, ...]:
        return tuple(p.multiplicity for p in self.poles)

    @property
    def total_multiplicity(self) -> int:
        return sum(p.multiplicity for p in self.poles)


@dataclass(frozen=True)
class PoleContribution:
    """Residue at one pole, split by the derivative order l of f."""

    index: int
    energy: float
    weights: tuple[float, ...]
    values: tuple[float, ...]

    @property
    def total(self) -> float:
        return math.fsum(self.values)


@dataclass(frozen=True)
class ResidueResult:
    value: float
    per_pole: tuple[PoleContribution, ...]

    def bucket(self, order: int) -> float:
        """Sum of all contributions that use f^(order)."""
        return math.fsum(
            c.values[order] for c in self.per_pole if order < len(c.values)
        )


# ---------------------------------------------------------------------------
# Residue weights
# ---------------------------------------------------------------------------


def residue_weights_batch(energies: np.ndarray, multiplicities: Sequence[int]) -> list[np.ndarray]:
    """Weights for T integrands sharing one pole pattern.

    Args:
        energies: (T, P) pole energies, pairwise distinct in each row
        multiplicities: the P multiplicities, common to all rows

    Returns:
        list of P arrays; entry p has shape (T, m_p) and column l is w_{p,l}.
    """
    energies = np.atleast_2d(np.asarray(energies, dtype=float))
    mults = tuple(int(m) for m in multiplicities)
    if max(mults) - 1 > MAX_DERIVATIVE_ORDER:
        raise ResidueOrderError(
            f"Pole of order {max(mults)} needs f^({max(mults) - 1}); "
            f"recurrence depth is {MAX_DERIVATIVE_ORDER}"
        )
    out = []
    for p, m in enumerate(mults):
        # Taylor coefficients at E_p of prod_{q != p} (E_q - xi)^{-m_q}
        g = np.zeros((len(energies), m))
        g[:, 0] = 1.0
        for q, mq in enumerate(mults):
            if q == p:
                continue
            d = energies[:, q] - energies[:, p]
            n = np.arange(m)
            binom = np.array([math.comb(mq + i - 1, i) for i in n], dtype=float)
            series = binom * d[:, None] ** (-(mq + n))
            conv = np.zeros_like(g)
            for i in range(m):
                conv[:, i:] += g[:, i, None] * series[:, : m - i]
            g = conv
        sign = -1.0 if m % 2 else 1.0
        factorials = np.array([math.factorial(l) for l in range(m)], dtype=float)
        out.append(sign * g[:, ::-1] / factorials)
    return out


def residue_weights(spec: PoleSpec) -> list[np.ndarray]:
    """Per-pole weight vectors w_{p,0..m_p-1} for a single spec."""
    return [w[0] for w in residue_weights_batch(spec.energies[None, :], spec.multiplicities)]


def contour_integral(state: ThermoState, spec: PoleSpec) -> ResidueResult:
    """Exact residue sum, I[f / (xi - E)] = f(E) orientation."""
    contributions = []
    for p, (pole, weights) in enumerate(zip(spec.poles, residue_weights(spec))):
        derivs = fermi_derivatives(state, pole.energy, pole.multiplicity - 1)
        values = weights * derivs
        contributions.append(
            PoleContribution(p, pole.energy, tuple(weights.tolist()), tuple(values.tolist()))
        )
    value = math.fsum(c.total for c in contributions)
    return ResidueResult(value, tuple(contributions))


def merge_poles(raw: Iterable[tuple[float, int]], eps: float) -> PoleSpec:
    """Single-linkage clustering of pole energies closer than eps.

    Each cluster becomes one pole at the multiplicity-weighted mean energy.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    items = sorted((float(e), int(m)) for e, m in raw)
    clusters: list[list[tuple[float, int]]] = []
    for e, m in items:
        if clusters and e - clusters[-1][-1][0] <= eps:
            clusters[-1].append((e, m))
        else:
            clusters.append([(e, m)])
    merged = []
    for cluster in clusters:
        total = sum(m for _, m in cluster)
        mean = math.fsum(e * m for e, m in cluster) / total
        merged.append((mean, total))
    if len(merged) < len(items):
        logger.debug("Merged %d poles into %d", len(items), len(merged))
    return PoleSpec.of(merged)


# ---------------------------------------------------------------------------
# Quadrature oracle
# ---------------------------------------------------------------------------


def complex_fermi_log(state: ThermoState, xi: np.ndarray) -> np.ndarray:
    """ln(1 + e^{beta (mu - xi)}) continued off the real axis (|Im xi| < pi/beta)."""
    z = state.beta * (state.mu - np.asarray(xi, dtype=complex))
    big = z.real > 0
    safe = np.where(big, -z, z)
    return np.where(big, z, 0) + np.log1p(np.exp(safe))


def _integrand(state: ThermoState, spec: PoleSpec):
    energies = spec.energies
    mults = np.array(spec.multiplicities)

    def g(xi: complex) -> complex:
        return complex(complex_fermi_log(state, xi)) * complex(np.prod((energies - xi) ** (-mults)))

    return g


def _panels(lo: float, hi: float, breaks: Iterable[float], width: float) -> list[tuple[float, float]]:
    edges = sorted({lo, hi, *(b for b in breaks if lo < b < hi)})
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        count = max(1, math.ceil((b - a) / width))
        cuts = np.linspace(a, b, count + 1)
        out.extend(zip(cuts[:-1], cuts[1:]))
    return out


def quadrature_oracle(
    state: ThermoState,
    spec: PoleSpec,
    tol: float = ORACLE_TOL,
    panel_width: float = 0.0,
    limit: int = 200,
) -> float:
    """Integrate along the half-strip boundary numerically.

    Conjugation symmetry reduces the contour to
        I = -(1/pi) [ int_delta^R Im g(x + i eta) dx + int_0^eta Re g(delta + i y) dy ]
    with eta = pi / (2 beta), delta = min E - 1 and R past the decay of f.
    ``panel_width`` defaults to 4 eta; shrink it to raise the node budget.
    """
    g = _integrand(state, spec)
    eta = math.pi / (2.0 * state.beta)
    delta = float(spec.energies.min()) - 1.0
    right = max(state.mu, float(spec.energies.max())) + TAIL / state.beta + 1.0
    width = panel_width or 4.0 * eta

    pieces = []
    errors = []
    for a, b in _panels(delta, right, [*spec.energies, state.mu], width):
        val, err = integrate.quad(
            lambda x: g(complex(x, eta)).imag, a, b, epsabs=tol, epsrel=1e-13, limit=limit
        )
        pieces.append(val)
        errors.append(err)
    val, err = integrate.quad(
        lambda y: g(complex(delta, y)).real, 0.0, eta, epsabs=tol, epsrel=1e-13, limit=limit
    )
    pieces.append(val)
    errors.append(err)

    total = -math.fsum(pieces) / math.pi
    achieved = math.fsum(errors) / math.pi
    scale = max(1.0, abs(total))
    if achieved > 100 * tol * scale:
        raise QuadratureError(
            f"Contour quadrature did not converge: estimated error {achieved:.3e}", achieved
        )
    return total
