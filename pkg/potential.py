"""Periodic potentials on the cubic lattice as sparse Fourier series.

Units throughout the package: hbar = m = 1, lattice constant 1, so the
dual lattice is 2*pi*Z^3 and the Brillouin zone is (-pi, pi]^3.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from errors import PotentialError

logger = logging.getLogger("bloch_chi.potential")

TWO_PI = 2.0 * math.pi
HERMITIAN_TOL = 1e-12
FIXTURE_NAMES = ("free", "cosine3d", "separable_gap")
# Well depth multiplier of the separable_gap fixture relative to cosine3d.
SEPARABLE_GAP_DEPTH = 16.0


class ReciprocalVector(NamedTuple):
    """Integer coordinates of G = 2*pi*(n1, n2, n3)."""

    n1: int
    n2: int
    n3: int

    @property
    def cartesian(self) -> np.ndarray:
        return TWO_PI * np.array(self, dtype=float)

    @property
    def norm_inf(self) -> int:
        return max(abs(self.n1), abs(self.n2), abs(self.n3))

    def negated(self) -> "ReciprocalVector":
        return ReciprocalVector(-self.n1, -self.n2, -self.n3)


@dataclass(frozen=True)
class Violation:
    G: ReciprocalVector
    coefficient: complex
    reason: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class FourierPotential:
    """Finite map G -> V(G), stored as a sorted tuple so it hashes.

    Build with :meth:`from_mapping` or :meth:`from_records`; exact zeros are
    dropped so an all-zero potential compares equal to the empty one.
    """

    terms: tuple[tuple[ReciprocalVector, complex], ...] = field(default=())

    @classmethod
    def from_mapping(cls, mapping: Mapping[Sequence[int], complex]) -> "FourierPotential":
        items = []
        for key, value in mapping.items():
            if len(key) != 3:
                raise PotentialError(f"Reciprocal vector must have 3 components, got {key!r}")
            value = complex(value)
            if value == 0:
                continue
            items.append((ReciprocalVector(*(int(n) for n in key)), value))
        items.sort(key=lambda item: item[0])
        keys = [g for g, _ in items]
        if len(set(keys)) != len(keys):
            raise PotentialError("Duplicate reciprocal vectors in potential")
        return cls(tuple(items))

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, float]]) -> "FourierPotential":
        """Load ``{n1, n2, n3, re, im}`` records as found in config files."""
        mapping: dict[tuple[int, int, int], complex] = {}
        for i, rec in enumerate(records):
            try:
                key = (int(rec["n1"]), int(rec["n2"]), int(rec["n3"]))
                value = complex(float(rec.get("re", 0.0)), float(rec.get("im", 0.0)))
            except (KeyError, TypeError, ValueError) as e:
                raise PotentialError(f"Malformed coefficient record #{i}: {e}") from e
            if key in mapping:
                raise PotentialError(f"Duplicate coefficient record for G={key}")
            mapping[key] = value
        return cls.from_mapping(mapping)

    def to_records(self) -> list[dict[str, float]]:
        return [
            {"n1": g.n1, "n2": g.n2, "n3": g.n3, "re": v.real, "im": v.imag}
            for g, v in self.terms
        ]

    @property
    def coefficients(self) -> dict[ReciprocalVector, complex]:
        return dict(self.terms)

    @property
    def support_radius(self) -> int:
        return max((g.norm_inf for g, _ in self.terms), default=0)

    @property
    def is_constant(self) -> bool:
        """True when V has no harmonic besides G = 0."""
        return all(g.norm_inf == 0 for g, _ in self.terms)

    def coefficient(self, G: Sequence[int]) -> complex:
        return self.coefficients.get(ReciprocalVector(*G), 0j)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for g, v in self.terms:
            h.update(f"{g.n1},{g.n2},{g.n3}:{v.real.hex()},{v.imag.hex()};".encode())
        return h.hexdigest()


def validate(pot: FourierPotential) -> ValidationReport:
    """Check Hermitian symmetry and a real G = 0 coefficient."""
    coeffs = pot.coefficients
    violations: list[Violation] = []
    for g, v in pot.terms:
        tol = HERMITIAN_TOL * (1.0 + abs(v))
        if g.norm_inf == 0:
            if abs(v.imag) > tol:
                violations.append(Violation(g, v, "G=0 coefficient is not real"))
            continue
        partner = g.negated()
        if partner not in coeffs:
            violations.append(
                Violation(partner, 0j, f"missing conjugate partner of G={tuple(g)}")
            )
        elif abs(coeffs[partner] - v.conjugate()) > tol:
            violations.append(
                Violation(g, v, f"V(G) != conj(V(-G)) with V(-G)={coeffs[partner]}")
            )
    if violations:
        logger.debug("Potential has %d symmetry violations", len(violations))
    return ValidationReport(tuple(violations))


def realspace_sum(pot: FourierPotential, x: Sequence[float]) -> complex:
    """Raw Fourier sum at x, before the imaginary residue is dropped."""
    x = np.asarray(x, dtype=float)
    total = 0j
    for g, v in pot.terms:
        total += v * complex(np.exp(1j * float(g.cartesian @ x)))
    return total


def evaluate_realspace(pot: FourierPotential, x: Sequence[float]) -> float:
    return realspace_sum(pot, x).real


def named_potential(name: str, amplitude: float = 0.0) -> FourierPotential:
    """Test fixtures.

    - ``free``: V = 0.
    - ``cosine3d``: V(x) = amplitude * sum_i cos(2 pi x_i).
    - ``separable_gap``: V(x) = -16 * amplitude * sum_i cos(2 pi x_i); deep
      separable wells whose lowest gap is open for amplitude >= 1.
    """
    if name == "free":
        return FourierPotential()
    if name == "cosine3d":
        half = 0.5 * amplitude
    elif name == "separable_gap":
        half = -0.5 * SEPARABLE_GAP_DEPTH * amplitude
    else:
        raise PotentialError(
            f"Unknown potential fixture '{name}'. Expected one of: {', '.join(FIXTURE_NAMES)}"
        )
    mapping = {}
    for axis in range(3):
        e = [0, 0, 0]
        e[axis] = 1
        mapping[tuple(e)] = half
        mapping[tuple(-n for n in e)] = half
    return FourierPotential.from_mapping(mapping)
