"""Command-line entry point: configuration, commands and result records."""

import argparse
import csv
import hashlib
import json
import logging
import math
import re
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, model_validator

from asym import DEFAULT_LADDER, SWEEP_COLUMNS, landau_peierls_check
from bz import BandData, BZGrid, ThermoState, band_data, ids
from cache import EigenCache, default_cache_dir
from chi import (
    chi_finite_T,
    chi_zero_T_metal,
    chi_zero_T_SC,
    coeffs_via_residues,
    explicit_coeffs,
    f_coefficient,
    integration_by_parts_residual,
    map_points,
)
from errors import BlochError, ConfigError, PotentialError, VerificationError
from fermi import classify, gap_edge_constant, mu_sequence, solve_mu
from fiber import band_arrays, band_velocity, hessian, is_isolated, plane_wave_basis, rephase, solve, solve_many
from potential import FourierPotential, named_potential, validate
from residue import PoleSpec, contour_integral, quadrature_oracle
from surface import TetraMesh, write_obj

logger = logging.getLogger("bloch_chi.cli")

COMMANDS = ("bands", "ids", "mu", "classify", "chi", "chi0", "sweep", "verify")
UNITS = "hbar=m=1, lattice=1, (e/c)^2=1, spinless"
FD_STEP = 1e-6
VELOCITY_TOL = 1e-6
FD_GAP = 0.05
DUAL_GAP = 1e-3
IBP_BANDS = 8
IBP_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Configuration models
# ---------------------------------------------------------------------------


class CoefficientRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n1: int
    n2: int
    n3: int
    re: float = 0.0
    im: float = 0.0


class PotentialConfig(BaseModel):
    """Named fixture with an amplitude, or inline Fourier coefficients."""

    model_config = ConfigDict(str_strip_whitespace=True, extra="forbid")
    fixture: Optional[str] = Field(
        default=None, description="One of: free, cosine3d, separable_gap"
    )
    amplitude: float = Field(default=0.0, description="Fixture amplitude")
    coefficients: Optional[list[CoefficientRecord]] = Field(
        default=None, description="Inline V(G) records {n1, n2, n3, re, im}"
    )

    @model_validator(mode="after")
    def _exactly_one(self) -> "PotentialConfig":
        if (self.fixture is None) == (self.coefficients is None):
            raise ValueError("set exactly one of 'fixture' and 'coefficients'")
        return self

    def build(self) -> FourierPotential:
        if self.fixture is not None:
            return named_potential(self.fixture, self.amplitude)
        return FourierPotential.from_records(r.model_dump() for r in self.coefficients)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n_per_axis: int = Field(default=8, ge=1, description="Grid points per axis")
    shift: bool = Field(default=True, description="Cell-centred grid avoiding k = 0")


class ToleranceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    isolation_margin: PositiveFloat = Field(default=1e-3, description="Metal isolation margin")
    merge: Optional[PositiveFloat] = Field(default=None, description="Pole merge distance")
    quadrature: PositiveFloat = Field(default=1e-11, description="Residue oracle tolerance")
    residue: PositiveFloat = Field(default=1e-9, description="Residue vs oracle agreement")
    sum_rule: PositiveFloat = Field(default=1e-5, description="Sum rules vs finite differences")
    coefficients: PositiveFloat = Field(default=1e-8, description="Explicit vs residue coefficients")
    gauge: PositiveFloat = Field(default=1e-10, description="Coefficient change under rephasing")


class VerifyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    samples: int = Field(default=10, ge=1, description="Random k-points per check")
    residue_specs: int = Field(default=50, ge=1, description="Random pole specs")
    seed: int = 0
    bands: int = Field(default=4, ge=1, description="Bands checked per k-point")
    ibp_beta: PositiveFloat = Field(default=1.0, description="beta of the integration-by-parts check")
    ibp_rho0: PositiveFloat = Field(default=0.5, description="rho0 of the integration-by-parts check")
    ibp_band: int = Field(default=1, ge=1, description="Band of the integration-by-parts check")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    potential: PotentialConfig
    cutoff_n: int = Field(default=1, ge=0)
    grid: GridConfig = Field(default_factory=GridConfig)
    n_bands: Optional[int] = Field(default=None, ge=1, description="Bands kept per k-point")
    beta: Optional[PositiveFloat] = None
    rho0: Optional[PositiveFloat] = None
    mu: Optional[float] = None
    band_cutoff: Optional[int] = Field(default=None, ge=1, description="J")
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    cache_dir: Optional[str] = None
    output: Optional[str] = None
    surface_obj: Optional[str] = Field(default=None, description="chi0: write the metal Fermi surface as OBJ")
    k_path: list[tuple[float, float, float]] = Field(
        default_factory=lambda: [(0.0, 0.0, 0.0), (math.pi, 0.0, 0.0), (math.pi, math.pi, 0.0)]
    )
    path_points: int = Field(default=20, ge=1, description="Points per k-path segment")
    energies: list[float] = Field(default_factory=lambda: [float(e) for e in range(1, 11)])
    betas: list[PositiveFloat] = Field(default_factory=list, description="mu(beta) table")
    rho_ladder: list[PositiveFloat] = Field(default_factory=lambda: list(DEFAULT_LADDER))
    verify: VerifyConfig = Field(default_factory=VerifyConfig)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _key_line(text: str, key: str) -> Optional[int]:
    pattern = re.compile(rf'"{re.escape(key)}"\s*:')
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return lineno
    return None


def load_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Raises:
        ConfigError: unreadable file, JSON syntax error or invalid field
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}", line=e.lineno) from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = [str(p) for p in err["loc"]]
        keys = [p for p in err["loc"] if isinstance(p, str)]
        line = _key_line(text, keys[-1]) if keys else None
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {'.'.join(loc) or '<root>'}: {err['msg']}", line=line) from e


def resolve_cache(flag: Optional[str], config: RunConfig, disabled: bool) -> Optional[EigenCache]:
    if disabled:
        return None
    root = flag or config.cache_dir or default_cache_dir()
    return EigenCache(Path(root)) if root else None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


class CommandOutput(BaseModel):
    result: dict[str, Any]
    table: Optional[list[list[Any]]] = None


class CheckResult(BaseModel):
    name: str
    passed: bool
    worst: float
    tolerance: float
    samples: int


class VerifyReport(BaseModel):
    passed: bool
    checks: list[CheckResult]


def _potential(config: RunConfig) -> FourierPotential:
    pot = config.potential.build()
    report = validate(pot)
    if not report.ok:
        first = report.violations[0]
        raise PotentialError(
            f"Potential violates Hermitian symmetry at G={tuple(first.G)}: {first.reason}",
            {"violations": len(report.violations)},
        )
    return pot


def _bands(config: RunConfig, threads: int, cache: Optional[EigenCache], velocities: bool = False) -> BandData:
    pot = _potential(config)
    basis = plane_wave_basis(config.cutoff_n)
    grid = BZGrid(config.grid.n_per_axis, config.grid.shift)
    return band_data(pot, basis, grid, config.n_bands, velocities=velocities, threads=threads, cache=cache)


def _require(config: RunConfig, command: str, *names: str) -> None:
    for name in names:
        if getattr(config, name) is None:
            raise ConfigError(f"'{name}' is required for the {command} command")


def _single_density(config: RunConfig, command: str) -> None:
    if config.rho0 is not None and config.mu is not None:
        raise ConfigError(f"rho0 and mu are mutually exclusive for the {command} command; set exactly one")
    if config.rho0 is None and config.mu is None:
        raise ConfigError(f"Set exactly one of rho0 and mu for the {command} command")


def _path_points(config: RunConfig) -> np.ndarray:
    corners = np.asarray(config.k_path, dtype=float)
    if len(corners) == 1:
        return corners
    segments = [
        np.linspace(a, b, config.path_points, endpoint=False) for a, b in zip(corners[:-1], corners[1:])
    ]
    return np.concatenate(segments + [corners[-1:]])


def cmd_bands(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    bands = _bands(config, threads, cache)
    shown = config.n_bands or min(bands.n_bands, 8)
    path = _path_points(config)
    energies, _ = band_arrays(bands.pot, bands.basis, path, shown)
    table = [["k1", "k2", "k3", *(f"E_{n}" for n in range(1, shown + 1))]]
    table += [[*k.tolist(), *e.tolist()] for k, e in zip(path, energies)]
    return CommandOutput(
        result={
            "bands": [
                {"band": n, "min": bands.band_min(n), "max": bands.band_max(n)} for n in range(1, shown + 1)
            ],
            "energy_floor": bands.energy_floor,
            "path_points": len(path),
        },
        table=table,
    )


def cmd_ids(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    bands = _bands(config, threads, cache)
    free = bands.pot.is_constant
    offset = bands.pot.coefficient((0, 0, 0)).real
    header = ["energy", "ids"] + (["free_electron"] if free else [])
    rows = []
    for e in config.energies:
        row = [e, ids(bands, e)]
        if free:
            row.append(max(0.0, 2.0 * (e - offset)) ** 1.5 / (6.0 * math.pi ** 2))
        rows.append(row)
    return CommandOutput(
        result={"rows": [dict(zip(header, r)) for r in rows], "capacity": bands.n_bands},
        table=[header] + rows,
    )


def cmd_mu(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    _require(config, "mu", "beta", "rho0")
    bands = _bands(config, threads, cache)
    result: dict[str, Any] = {"beta": config.beta, "rho0": config.rho0, "mu": solve_mu(bands, config.beta, config.rho0)}
    if config.betas:
        reference = classify(bands, config.rho0).fermi_energy
        result["fermi_energy"] = reference
        result["sequence"] = mu_sequence(bands, config.rho0, config.betas, reference)
    return CommandOutput(result=result)


def cmd_classify(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    _require(config, "classify", "rho0")
    bands = _bands(config, threads, cache)
    cls = classify(bands, config.rho0)
    result = cls.model_dump(mode="json")
    if cls.variant == "SC":
        result["gap"] = cls.gap
        result["gap_edge_constant"] = gap_edge_constant(bands, cls.band)
    return CommandOutput(result=result)


def cmd_chi(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    _require(config, "chi", "beta")
    _single_density(config, "chi")
    bands = _bands(config, threads, cache)
    result = chi_finite_T(
        bands,
        config.beta,
        rho0=config.rho0,
        mu=config.mu,
        band_cutoff=config.band_cutoff,
        threads=threads,
        cache=cache,
        merge_eps=config.tolerances.merge,
    )
    return CommandOutput(result=result.model_dump(mode="json"))


def cmd_chi0(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    _require(config, "chi0", "rho0")
    bands = _bands(config, threads, cache)
    cls = classify(bands, config.rho0)
    if cls.variant == "SC":
        result = chi_zero_T_SC(bands, config.rho0, config.band_cutoff, threads=threads, cache=cache)
        if config.surface_obj:
            logger.warning("No Fermi surface in a semiconductor; surface_obj ignored")
        return CommandOutput(result=result.model_dump(mode="json"))

    bands = _bands(config, threads, cache, velocities=True)
    result = chi_zero_T_metal(
        bands,
        config.rho0,
        config.band_cutoff,
        margin=config.tolerances.isolation_margin,
        threads=threads,
        cache=cache,
    )
    payload = result.model_dump(mode="json")
    if config.surface_obj:
        mesh = TetraMesh.from_band(bands.grid, bands.band(result.band))
        faces = write_obj(mesh, result.diagnostics["surface_level"], Path(config.surface_obj))
        payload["surface_obj"] = {"path": config.surface_obj, "faces": faces}
    return CommandOutput(result=payload)


def cmd_sweep(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    bands = _bands(config, threads, cache, velocities=True)
    report = landau_peierls_check(bands, config.rho_ladder, config.band_cutoff, threads=threads, cache=cache)
    table = [list(SWEEP_COLUMNS)] + [[getattr(r, c) for c in SWEEP_COLUMNS] for r in report.rows]
    return CommandOutput(result=report.model_dump(mode="json"), table=table)


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------


def _random_k(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(-math.pi, math.pi, size=(count, 3))


def check_sum_rules(pot, basis, kpoints, bands: int, tol: float) -> list[CheckResult]:
    """Band velocities and Hessians against central differences of E_N and of the velocities."""
    eye = np.eye(3)
    worst_v = worst_h = 0.0
    checked = 0
    for k in kpoints:
        sol = solve(pot, basis, k)
        nb = min(bands, sol.dimension)
        stencil = np.array([k + s * FD_STEP * eye[b] for b in range(3) for s in (1, -1)])
        e, vel = band_arrays(pot, basis, stencil, nb, velocities=True)
        e = e.reshape(3, 2, nb)
        vel = vel.reshape(3, 2, nb, 3)
        for n in range(1, nb + 1):
            gaps = np.abs(np.delete(sol.energies, n - 1) - sol.energies[n - 1])
            if not is_isolated(sol, n) or gaps.min() < FD_GAP:
                continue
            fd_vel = (e[:, 0, n - 1] - e[:, 1, n - 1]) / (2 * FD_STEP)
            # fd_hess[a, b] = d v_a / d k_b
            fd_hess = ((vel[:, 0, n - 1] - vel[:, 1, n - 1]) / (2 * FD_STEP)).T
            v = band_velocity(sol, n)
            h = hessian(sol, n)
            worst_v = max(worst_v, float(np.max(np.abs(v - fd_vel) / np.maximum(1.0, np.abs(v)))))
            worst_h = max(worst_h, float(np.max(np.abs(h - fd_hess) / np.maximum(1.0, np.abs(h)))))
            checked += 1
    return [
        CheckResult(
            name="velocity_sum_rule", passed=worst_v <= VELOCITY_TOL, worst=worst_v, tolerance=VELOCITY_TOL, samples=checked
        ),
        CheckResult(name="hessian_sum_rule", passed=worst_h <= tol, worst=worst_h, tolerance=tol, samples=checked),
    ]


def _random_spec(rng: np.random.Generator) -> PoleSpec:
    while True:
        count = int(rng.integers(1, 4))
        mults = rng.integers(1, 4, size=count)
        if mults.sum() > 5:
            continue
        energies = np.sort(rng.uniform(-2.0, 2.0, size=count))
        if count > 1 and np.diff(energies).min() < 0.2:
            continue
        return PoleSpec.of(zip(energies.tolist(), mults.tolist()))


def check_residue_oracle(rng: np.random.Generator, count: int, tol: float, quad_tol: float) -> CheckResult:
    """Residue sums against contour quadrature on random pole structures."""
    worst = 0.0
    for _ in range(count):
        spec = _random_spec(rng)
        state = ThermoState(float(rng.uniform(1.0, 50.0)), float(rng.uniform(-1.0, 1.0)))
        exact = contour_integral(state, spec).value
        numeric = quadrature_oracle(state, spec, tol=quad_tol)
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    return CheckResult(name="residue_oracle", passed=worst <= tol, worst=worst, tolerance=tol, samples=count)


def check_integration_by_parts(
    pot,
    basis,
    grid: BZGrid,
    beta: float,
    rho0: float,
    band: int,
    threads: int = 1,
    cache: Optional[EigenCache] = None,
) -> CheckResult:
    """Integration-by-parts identity on ``grid`` and on the doubled grid.

    Both sides are grid sums of smooth periodic functions when the band is
    isolated, so the mismatch has to shrink under refinement.
    """
    mismatch = []
    for n in (grid.n_per_axis, 2 * grid.n_per_axis):
        bands = band_data(
            pot, basis, BZGrid(n, grid.shift), min(basis.dimension, IBP_BANDS), threads=threads, cache=cache
        )
        lhs, rhs = integration_by_parts_residual(bands, beta, rho0, band, threads=threads)
        mismatch.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        logger.debug("Integration by parts on %d^3: %.3e vs %.3e", n, lhs, rhs)
    coarse, fine = mismatch
    limit = max(coarse, IBP_FLOOR)
    return CheckResult(name="integration_by_parts", passed=fine <= limit, worst=fine, tolerance=limit, samples=2)


def _coefficient_checks(sol, cutoff: int, bands: int, rng_phases: np.ndarray) -> tuple[float, float, float, float]:
    table = coeffs_via_residues(sol, cutoff)
    scale = 1.0 + float(np.abs(table.c).max())
    l4 = table.l4_bucket / scale
    dual = 0.0
    for n in range(1, min(bands, cutoff) + 1):
        gaps = np.abs(np.delete(sol.energies[:cutoff], n - 1) - sol.energies[n - 1])
        if gaps.min() < DUAL_GAP:
            continue
        explicit = explicit_coeffs(sol, n, cutoff)
        residue = table.coefficients(n)
        dual = max(dual, float(np.max(np.abs(explicit.c[2:] - residue.c[2:]))) / scale)
    rotated = coeffs_via_residues(rephase(sol, rng_phases), cutoff)
    gauge = float(np.abs(rotated.c - table.c).max()) / scale
    return l4, dual, gauge, table.imag_residue / scale


def cmd_verify(config: RunConfig, threads: int, cache: Optional[EigenCache]) -> CommandOutput:
    pot = _potential(config)
    basis = plane_wave_basis(config.cutoff_n)
    tol = config.tolerances
    rng = np.random.default_rng(config.verify.seed)
    kpoints = _random_k(rng, config.verify.samples)
    cutoff = config.band_cutoff or min(basis.dimension, 12)
    phases = np.exp(2j * math.pi * rng.random((len(kpoints), basis.dimension)))

    checks = check_sum_rules(pot, basis, kpoints, config.verify.bands, tol.sum_rule)
    checks.append(check_residue_oracle(rng, config.verify.residue_specs, tol.residue, tol.quadrature))

    solutions = solve_many(pot, basis, kpoints, threads)
    rows = map_points(
        lambda i: _coefficient_checks(solutions[i], cutoff, config.verify.bands, phases[i]),
        range(len(kpoints)),
        threads,
    )
    worst = np.max(np.array(rows), axis=0)
    for name, value, limit in (
        ("l4_bucket", worst[0], 1e-12),
        ("dual_path", worst[1], tol.coefficients),
        ("gauge_invariance", worst[2], tol.gauge),
        ("realness", worst[3], 1e-10),
    ):
        checks.append(
            CheckResult(name=name, passed=bool(value <= limit), worst=float(value), tolerance=limit, samples=len(rows))
        )

    gamma = solve(pot, basis, np.zeros(3))
    f1 = abs(f_coefficient(gamma, 1, min(basis.dimension, 30)))
    checks.append(CheckResult(name="f1_at_gamma", passed=f1 <= 1e-8, worst=f1, tolerance=1e-8, samples=1))
    checks.append(
        check_integration_by_parts(
            pot,
            basis,
            BZGrid(config.grid.n_per_axis, config.grid.shift),
            config.verify.ibp_beta,
            config.verify.ibp_rho0,
            config.verify.ibp_band,
            threads=threads,
            cache=cache,
        )
    )

    report = VerifyReport(passed=all(c.passed for c in checks), checks=checks)
    for c in checks:
        log = logger.info if c.passed else logger.error
        log("%-16s %s worst=%.3e tol=%.1e", c.name, "ok" if c.passed else "FAILED", c.worst, c.tolerance)
    if not report.passed:
        failed = [c.name for c in checks if not c.passed]
        raise VerificationError(f"Verification failed: {', '.join(failed)}", report.model_dump(mode="json"))
    return CommandOutput(result=report.model_dump(mode="json"))


HANDLERS = {
    "bands": cmd_bands,
    "ids": cmd_ids,
    "mu": cmd_mu,
    "classify": cmd_classify,
    "chi": cmd_chi,
    "chi0": cmd_chi0,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def build_record(command: str, config: RunConfig, output: CommandOutput) -> dict[str, Any]:
    return {
        "command": command,
        "config_hash": config.config_hash(),
        "units": UNITS,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "result": output.result,
    }


def write_outputs(record: dict[str, Any], table: Optional[list[list[Any]]], out: Optional[Path]) -> None:
    text = json.dumps(record, indent=2, ensure_ascii=False)
    if out is None:
        print(text)
        if table:
            logger.info("No output path; CSV table not written")
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n", encoding="utf-8")
    logger.info("Wrote %s", out)
    if table:
        csv_path = out.with_suffix(".csv")
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(table[0])
            writer.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in table[1:])
        logger.info("Wrote %s", csv_path)


def _error_record(e: Exception) -> dict[str, Any]:
    if isinstance(e, BlochError):
        return {"error": type(e).__name__, "message": str(e), "details": e.details}
    return {"error": type(e).__name__, "message": f"Unexpected error: {type(e).__name__}: {e}", "details": {}}


def run(
    command: str,
    config: Union[RunConfig, str, Path],
    threads: int = 1,
    out: Optional[Union[str, Path]] = None,
    cache_dir: Optional[str] = None,
    no_cache: bool = False,
) -> int:
    """Execute one command; returns the process exit status.

    Results go to ``out`` (or the config's ``output``, or stdout). Failures
    print a JSON error record and map to the error's exit code.
    """
    try:
        if command not in HANDLERS:
            raise ConfigError(f"Unknown command '{command}'. Expected one of: {', '.join(COMMANDS)}")
        if not isinstance(config, RunConfig):
            config = load_config(config)
        cache = resolve_cache(cache_dir, config, no_cache)
        output = HANDLERS[command](config, max(1, threads), cache)
        target = out or config.output
        write_outputs(build_record(command, config, output), output.table, Path(target) if target else None)
        return 0
    except BlochError as e:
        logger.error("Error: %s", e)
        print(json.dumps(_error_record(e), indent=2, ensure_ascii=False))
        return e.exit_code
    except Exception as e:
        logger.error("Unexpected error: %s: %s", type(e).__name__, e)
        print(json.dumps(_error_record(e), indent=2, ensure_ascii=False))
        return 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bloch-chi", description="Orbital susceptibility of Bloch electrons")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads")
    parser.add_argument("--out", default=None, help="JSON output path (CSV goes next to it)")
    parser.add_argument("--cache", default=None, help="Eigendata cache directory")
    parser.add_argument("--no-cache", action="store_true", help="Disable the eigendata cache")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    return run(args.command, args.config, args.threads, args.out, args.cache, args.no_cache)


if __name__ == "__main__":
    sys.exit(main())
