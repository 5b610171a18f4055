"""Unit tests for cli.py — configuration loading, commands and result records."""

import json
import math
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from bz import BZGrid
from cache import EigenCache
from cli import (
    UNITS,
    CommandOutput,
    PotentialConfig,
    RunConfig,
    _path_points,
    check_integration_by_parts,
    check_residue_oracle,
    check_sum_rules,
    load_config,
    main,
    resolve_cache,
    run,
)
from errors import ConfigError, VerificationError
from fiber import plane_wave_basis
from potential import named_potential


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.json"
    path.write_text(text, encoding="utf-8")
    return path


def _free(**kwargs) -> RunConfig:
    return RunConfig(potential=PotentialConfig(fixture="free"), **kwargs)


# ---------------------------------------------------------------------------
# load_config
# ---------------------------------------------------------------------------


class TestLoadConfig:
    """Tests for load_config() diagnostics."""

    def test_valid(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"potential": {"fixture": "cosine3d", "amplitude": 2.0}, "rho0": 0.5}')
        config = load_config(path)
        assert config.potential.fixture == "cosine3d"
        assert config.rho0 == 0.5
        assert config.grid.n_per_axis == 8

    def test_syntax_error_line(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{\n  "potential": {"fixture": "free"},\n  "rho0": 0.5,\n}\n')
        with pytest.raises(ConfigError) as exc_info:
            load_config(path)
        assert exc_info.value.line == 4

    def test_invalid_field_line(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{\n  "potential": {"fixture": "free"},\n  "cutoff_n": -1\n}\n')
        with pytest.raises(ConfigError, match="cutoff_n") as exc_info:
            load_config(path)
        assert exc_info.value.line == 3
        assert exc_info.value.details == {"line": 3}

    def test_potential_needs_exactly_one_source(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"potential": {"fixture": "free", "coefficients": []}}')
        with pytest.raises(ConfigError, match="exactly one"):
            load_config(path)

    def test_unknown_key(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{\n  "potential": {"fixture": "free"},\n  "temperature": 1\n}')
        with pytest.raises(ConfigError) as exc_info:
            load_config(path)
        assert exc_info.value.line == 3

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="Cannot read config"):
            load_config(tmp_path / "absent.json")


class TestRunConfig:
    """Tests for config hashing, cache resolution and k-paths."""

    def test_hash_is_stable(self) -> None:
        assert _free(rho0=0.1).config_hash() == _free(rho0=0.1).config_hash()
        assert _free(rho0=0.1).config_hash() != _free(rho0=0.2).config_hash()
        assert len(_free().config_hash()) == 64

    def test_resolve_cache(self, tmp_path: Path) -> None:
        config = _free(cache_dir=str(tmp_path / "from-config"))
        assert resolve_cache(None, config, disabled=True) is None
        assert resolve_cache(str(tmp_path / "flag"), config, False).root == tmp_path / "flag"
        cache = resolve_cache(None, config, False)
        assert isinstance(cache, EigenCache)
        assert cache.root == tmp_path / "from-config"

    def test_path_points(self) -> None:
        path = _path_points(_free(path_points=20))
        assert path.shape == (41, 3)
        np.testing.assert_array_equal(path[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(path[-1], [math.pi, math.pi, 0.0])


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


class TestRun:
    """Tests for run() exit codes and output records."""

    def test_record_and_csv(self, tmp_path: Path) -> None:
        output = CommandOutput(result={"x": 1.5}, table=[["a", "b"], [1.5, 2]])
        handler = MagicMock(return_value=output)
        config = _free()
        out = tmp_path / "results" / "bands.json"
        with patch.dict("cli.HANDLERS", {"bands": handler}):
            assert run("bands", config, threads=0, out=out, no_cache=True) == 0
        handler.assert_called_once_with(config, 1, None)
        record = json.loads(out.read_text(encoding="utf-8"))
        assert record["command"] == "bands"
        assert record["units"] == UNITS
        assert record["result"] == {"x": 1.5}
        assert record["config_hash"] == config.config_hash()
        assert out.with_suffix(".csv").read_text(encoding="utf-8").splitlines() == ["a,b", "1.5,2"]

    def test_stdout_without_out(self, capsys: pytest.CaptureFixture) -> None:
        handler = MagicMock(return_value=CommandOutput(result={"ok": True}))
        with patch.dict("cli.HANDLERS", {"ids": handler}):
            assert run("ids", _free(), no_cache=True) == 0
        assert json.loads(capsys.readouterr().out)["result"] == {"ok": True}

    def test_unknown_command(self, capsys: pytest.CaptureFixture) -> None:
        assert run("plot", _free(), no_cache=True) == 1
        record = json.loads(capsys.readouterr().out)
        assert record["error"] == "ConfigError"
        assert "Unknown command 'plot'" in record["message"]

    def test_rho0_and_mu_conflict(self, capsys: pytest.CaptureFixture) -> None:
        assert run("chi", _free(beta=2.0, rho0=0.1, mu=0.5), no_cache=True) == 1
        record = json.loads(capsys.readouterr().out)
        assert "mutually exclusive" in record["message"]

    def test_missing_required_field(self, capsys: pytest.CaptureFixture) -> None:
        assert run("mu", _free(rho0=0.1), no_cache=True) == 1
        assert "'beta' is required" in json.loads(capsys.readouterr().out)["message"]

    def test_verification_failure_exit_code(self, capsys: pytest.CaptureFixture) -> None:
        handler = MagicMock(side_effect=VerificationError("Verification failed: dual_path", {"passed": False}))
        with patch.dict("cli.HANDLERS", {"verify": handler}):
            assert run("verify", _free(), no_cache=True) == 2
        record = json.loads(capsys.readouterr().out)
        assert record["error"] == "VerificationError"
        assert record["details"] == {"passed": False}

    def test_unexpected_error(self, capsys: pytest.CaptureFixture) -> None:
        handler = MagicMock(side_effect=RuntimeError("boom"))
        with patch.dict("cli.HANDLERS", {"bands": handler}):
            assert run("bands", _free(), no_cache=True) == 1
        assert "Unexpected error: RuntimeError: boom" in json.loads(capsys.readouterr().out)["message"]

    def test_config_path(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"potential": {"fixture": "free"}, "grid": {"n_per_axis": 8}, "rho0": 0.05}')
        out = tmp_path / "classify.json"
        assert run("classify", path, out=out, no_cache=True) == 0
        result = json.loads(out.read_text(encoding="utf-8"))["result"]
        assert result["variant"] == "Metal"
        assert result["band"] == 1

    def test_ids_free_column(self, tmp_path: Path) -> None:
        out = tmp_path / "ids.json"
        config = _free(grid={"n_per_axis": 4}, energies=[1.0, 2.0])
        assert run("ids", config, out=out, no_cache=True) == 0
        rows = json.loads(out.read_text(encoding="utf-8"))["result"]["rows"]
        assert rows[0]["free_electron"] == pytest.approx(2.0 ** 1.5 / (6 * math.pi ** 2))
        assert out.with_suffix(".csv").exists()

    @pytest.mark.slow
    def test_verify_passes(self, tmp_path: Path) -> None:
        config = RunConfig(
            potential=PotentialConfig(fixture="cosine3d", amplitude=1.0),
            verify={"samples": 2, "residue_specs": 5, "bands": 2},
        )
        out = tmp_path / "verify.json"
        assert run("verify", config, out=out, no_cache=True) == 0
        assert json.loads(out.read_text(encoding="utf-8"))["result"]["passed"] is True

    @pytest.mark.slow
    def test_verify_is_thread_independent(self, tmp_path: Path) -> None:
        config = RunConfig(
            potential=PotentialConfig(fixture="cosine3d", amplitude=1.0),
            verify={"samples": 2, "residue_specs": 5, "bands": 2},
        )
        records = []
        for threads in (1, 8):
            out = tmp_path / f"verify-{threads}.json"
            assert run("verify", config, threads=threads, out=out, no_cache=True) == 0
            record = json.loads(out.read_text(encoding="utf-8"))
            record.pop("timestamp")
            records.append(record)
        assert records[0] == records[1]

    def test_chi0_writes_fermi_surface(self, tmp_path: Path) -> None:
        obj = tmp_path / "fs.obj"
        config = _free(grid={"n_per_axis": 8}, rho0=0.05, surface_obj=str(obj))
        out = tmp_path / "chi0.json"
        assert run("chi0", config, out=out, no_cache=True) == 0
        result = json.loads(out.read_text(encoding="utf-8"))["result"]
        assert obj.exists()
        assert result["surface_obj"]["faces"] > 0
        assert result["surface_obj"]["path"] == str(obj)


# ---------------------------------------------------------------------------
# Verification checks
# ---------------------------------------------------------------------------


class TestChecks:
    """Tests for the individual verification checks."""

    def test_sum_rules(self) -> None:
        kpoints = np.array([[0.3, 0.2, 0.1], [1.0, -0.5, 2.0]])
        checks = check_sum_rules(named_potential("cosine3d", 1.0), plane_wave_basis(1), kpoints, 2, 1e-5)
        assert [c.name for c in checks] == ["velocity_sum_rule", "hessian_sum_rule"]
        assert all(c.passed for c in checks)

    def test_residue_oracle(self) -> None:
        check = check_residue_oracle(np.random.default_rng(1), 5, 1e-9, 1e-11)
        assert check.name == "residue_oracle"
        assert check.samples == 5
        assert check.passed

    @pytest.mark.parametrize("sides, passed", [([(1.0, 1.1), (1.0, 1.01)], True), ([(1.0, 1.01), (1.0, 1.1)], False)])
    def test_integration_by_parts_needs_refinement(self, sides, passed: bool) -> None:
        with patch("cli.band_data") as bands, patch("cli.integration_by_parts_residual", side_effect=sides):
            check = check_integration_by_parts(None, plane_wave_basis(1), BZGrid(4), 1.0, 0.5, 1)
        assert [c.args[2].n_per_axis for c in bands.call_args_list] == [4, 8]
        assert check.name == "integration_by_parts"
        assert check.samples == 2
        assert check.passed is passed


# ---------------------------------------------------------------------------
# main
# ---------------------------------------------------------------------------


class TestMain:
    """Tests for argument parsing."""

    def test_missing_config(self) -> None:
        with pytest.raises(SystemExit) as exc_info:
            main(["chi"])
        assert exc_info.value.code == 1

    def test_unknown_command(self) -> None:
        with pytest.raises(SystemExit) as exc_info:
            main(["plot", "--config", "run.json"])
        assert exc_info.value.code == 1

    def test_runs_command(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"potential": {"fixture": "free"}, "grid": {"n_per_axis": 4}, "energies": [1.0]}')
        out = tmp_path / "ids.json"
        assert main(["ids", "--config", str(path), "--out", str(out), "--no-cache"]) == 0
        assert json.loads(out.read_text(encoding="utf-8"))["command"] == "ids"
