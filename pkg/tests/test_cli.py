import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from carrollian import presets
from carrollian.cli import main
from carrollian.connection import ExprConnection
from carrollian.modelfile import dump_model


def run(argv, capsys, caplog=None):
    """Exit code, stdout and the logged messages (stderr when logging is not captured)."""
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err + (caplog.text if caplog is not None else "")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    out = {}
    for name in presets.names():
        path = root / f"{name}.toml"
        dump_model(presets.make_preset(name), path)
        out[name] = path
    flat = presets.flat_carroll(3)
    nd = flat.replace(metric=[["1", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]])
    out["nondegenerate"] = root / "nondegenerate.toml"
    dump_model(nd, out["nondegenerate"])
    line = presets.vector_field_line()
    bad = ExprConnection.build(line, {(0, 0, 0): "log(x - 1)"})
    out["bad-gamma"] = root / "bad-gamma.toml"
    dump_model(line, out["bad-gamma"], bad)
    out["garbage"] = root / "garbage.toml"
    out["garbage"].write_text("[chart\n", encoding="utf-8")
    return out


class TestValidate:
    def test_flat_passes(self, files, capsys):
        code, out, _ = run(["validate", files["flat-carroll"]], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["verdict"] == "pass"
        assert rep["parameters"] == {"samples": 128, "seed": 42, "tol": 1e-8}
        assert "wall" not in out

    def test_nondegenerate_metric_fails(self, files, capsys, caplog):
        code, out, err = run(["validate", files["nondegenerate"]], capsys, caplog)
        assert code == 1
        assert "kernel_rank" in err
        failed = [c["name"] for c in json.loads(out)["checks"] if not c["passed"]]
        assert "kernel_rank" in failed

    def test_missing_file(self, tmp_path, capsys, caplog):
        code, _, err = run(["validate", tmp_path / "nope.toml"], capsys, caplog)
        assert code == 2 and "cannot read" in err

    def test_parse_error(self, files, capsys, caplog):
        code, _, err = run(["validate", files["garbage"]], capsys, caplog)
        assert code == 2 and "TOML" in err

    def test_report_file(self, files, tmp_path, capsys):
        out_path = tmp_path / "rep.json"
        code, out, _ = run(["validate", files["rotation"], "--samples", 16, "--out", out_path], capsys)
        assert code == 0 and out_path.read_text(encoding="utf-8") == out


class TestLeaves:
    def test_line_census(self, files, tmp_path, capsys):
        csv_path = tmp_path / "leaves.csv"
        code, out, _ = run(["leaves", files["vector-field-line"], "--grid", "21x21", "--out", csv_path], capsys)
        rep = json.loads(out)
        assert code == 0
        assert rep["counts"]["Point"] == 21 and rep["counts"]["Line"] == 420
        rows = read_csv(csv_path)
        assert len(rows) == 441
        points = {round(float(r["y"]), 12) for r in rows if r["class"] == "Point"}
        assert points == {0.0}

    def test_rotation(self, files, capsys):
        code, out, _ = run(["leaves", files["rotation"], "--grid", "11"], capsys)
        counts = json.loads(out)["counts"]
        assert code == 0 and counts["Point"] == 1 and counts["Circle"] > counts["Line"]

    def test_flat_all_lines(self, files, capsys):
        code, out, _ = run(["leaves", files["flat-carroll"], "--grid", "3x3x3"], capsys)
        assert code == 0 and json.loads(out)["counts"]["Line"] == 27

    def test_bad_grid(self, files, capsys):
        code, _, _ = run(["leaves", files["rotation"], "--grid", "3x3x3"], capsys)
        assert code == 2


class TestConnect:
    def test_flat_torsion_free(self, files, capsys):
        code, out, _ = run(["connect", files["flat-carroll"], "--method", "torsion-free"], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["residuals"]["torsion"] <= 1e-10
        assert "minimum-norm" in rep["gauge"]

    def test_nonstationary_torsion_free(self, files, capsys):
        code, out, _ = run(["connect", files["nonstationary-tangent"], "--method", "torsion-free"], capsys)
        rep = json.loads(out)
        assert code == 3 and rep["verdict"] == "infeasible"
        assert rep["is_stationary"] is False and rep["stationarity_residual"] > 0

    def test_minimal_direct_sum(self, files, tmp_path, capsys):
        gamma = tmp_path / "gamma.csv"
        code, out, _ = run(
            ["connect", files["direct-sum"], "--method", "minimal-direct-sum", "--emit-gamma", gamma, "--gamma-grid", "3"],
            capsys,
        )
        rep = json.loads(out)
        assert code == 0
        assert rep["residuals"]["nonmetricity"] <= 1e-9 and rep["residuals"]["l_compat"] <= 1e-9
        rows = read_csv(gamma)
        assert len(rows) == 9 and len(rows[0]) == 2 + 27

    @pytest.mark.parametrize("method", ["l-compat", "carrollian", "frame-parallel"])
    def test_methods_on_gl2(self, files, capsys, method):
        code, out, _ = run(["connect", files["action-gl2"], "--method", method, "--samples", 16], capsys)
        assert code == 0 and json.loads(out)["verdict"] == "pass"

    def test_base_file_missing_table(self, files, capsys, caplog):
        code, _, err = run(["connect", files["flat-carroll"], "--base", "file"], capsys, caplog)
        assert code == 2 and "[connection]" in err

    def test_unknown_method(self, files, capsys):
        with pytest.raises(SystemExit) as info:
            main(["connect", str(files["flat-carroll"]), "--method", "bogus"])
        assert info.value.code == 2
        capsys.readouterr()


class TestGeodesic:
    def test_closed_form(self, files, tmp_path, capsys):
        csv_path = tmp_path / "path.csv"
        code, out, _ = run(
            ["geodesic", files["vector-field-line"], "--start", "0,1", "--alpha", "1", "--t", 2, "--out", csv_path],
            capsys,
        )
        rep = json.loads(out)
        assert code == 0 and rep["classification"] == "Particle"
        rows = read_csv(csv_path)
        assert list(rows[0]) == ["t", "gamma_x", "gamma_y", "alpha_1", "speed", "misalignment"]
        assert float(rows[-1]["gamma_x"]) == pytest.approx(2.0, abs=1e-6)
        assert float(rows[-1]["gamma_y"]) == pytest.approx(1.0, abs=1e-12)

    def test_frozen(self, files, capsys):
        code, out, _ = run(["geodesic", files["vector-field-line"], "--start", "0,0", "--alpha", "1", "--t", 2], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["events"][-1]["event"] == "Frozen"
        assert np.max(np.abs(rep["final_gamma"])) <= 1e-9

    def test_swifton(self, files, capsys):
        code, out, _ = run(
            ["geodesic", files["direct-sum"], "--connection", "carrollian", "--start", "0,1", "--alpha", "0,1,1", "--t", 0.5],
            capsys,
        )
        assert code == 0 and json.loads(out)["classification"] == "Swifton"

    def test_torsion_free_infeasible(self, files, capsys):
        code, out, _ = run(
            ["geodesic", files["nonstationary-tangent"], "--connection", "torsion-free", "--start", "0,0", "--alpha", "0,1"],
            capsys,
        )
        assert code == 3 and json.loads(out)["infeasible"] is True

    def test_particle_force(self, files, capsys):
        code, out, _ = run(
            [
                "geodesic", files["direct-sum"], "--connection", "frame-parallel", "--start", "0,1",
                "--alpha", "0,0,1", "--force", "0,0,0.1", "--force-mode", "particle", "--t", 0.5,
            ],
            capsys,
        )
        rep = json.loads(out)
        assert code == 0 and rep["max_misalignment"] <= 1e-6

    def test_integration_failure(self, files, capsys, caplog):
        code, _, err = run(
            ["geodesic", files["bad-gamma"], "--connection", "file", "--start", "0,1", "--alpha", "1"], capsys, caplog
        )
        assert code == 4 and "integration failed" in err

    @pytest.mark.parametrize(
        "start, alpha",
        [("0", "1"), ("0,a", "1"), ("0,1", "0"), ("9,9", "1")],
    )
    def test_bad_inputs(self, files, capsys, start, alpha):
        code, _, _ = run(["geodesic", files["vector-field-line"], "--start", start, "--alpha", alpha], capsys)
        assert code == 2


class TestPreset:
    def test_emit_validates(self, tmp_path, capsys):
        path = tmp_path / "vfl.toml"
        assert run(["preset", "vector-field-line", "--param", "X=y,0", "--emit", path], capsys)[0] == 0
        assert run(["validate", path], capsys)[0] == 0

    def test_action_gl2(self, tmp_path, capsys):
        path = tmp_path / "gl2.toml"
        assert run(["preset", "action-gl2", "--emit", path], capsys)[0] == 0
        assert run(["validate", path], capsys)[0] == 0

    def test_unknown_preset(self, capsys, caplog):
        code, _, err = run(["preset", "nonsense"], capsys, caplog)
        assert code == 2 and "available" in err

    def test_list(self, capsys):
        code, out, _ = run(["preset", "--list"], capsys)
        assert code == 0 and out.split() == presets.names()

    def test_stdout(self, capsys):
        code, out, _ = run(["preset", "rotation"], capsys)
        assert code == 0 and "[algebroid]" in out

    def test_bad_param(self, capsys):
        assert run(["preset", "flat-carroll", "--param", "n"], capsys)[0] == 2
        assert run(["preset", "flat-carroll", "--param", "q=3"], capsys)[0] == 2


class TestDeterminism:
    def invoke(self, argv):
        env = dict(os.environ)
        proc = subprocess.run(
            [sys.executable, "-m", "carrollian.cli", *map(str, argv)], capture_output=True, text=True, env=env
        )
        return proc.returncode, proc.stdout

    def test_repeated_runs_are_identical(self, files, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["geodesic", files["direct-sum"], "--connection", "carrollian", "--start", "0,1", "--alpha", "0,1,1"]
        r1 = self.invoke(argv + ["--t", "0.5", "--out", a])
        r2 = self.invoke(argv + ["--t", "0.5", "--out", b])
        assert r1 == r2 and r1[0] == 0
        assert a.read_bytes() == b.read_bytes()
        v1 = self.invoke(["validate", files["random"]])
        v2 = self.invoke(["validate", files["random"]])
        assert v1 == v2 and v1[0] == 0
