"""End-to-end command driver tests, all in-process through main(argv)."""
from __future__ import annotations

import json
import os
import shutil

import numpy as np
import pytest

from rtopt.cli import main
from rtopt.levelset import TRACE_HEADER

BASE = """
[geometry]
target_nodes = 1200

[material]
iron_linear = true

[scenario]
name = ANG
n_positions = 1
q_hat_deg = -60
interval_deg = -75, -45

[algorithm]
exterior_radius = 64
exterior_target_nodes = 1500
t_max = 12.0
n_t = 5
max_iterations = 12
seed = 0

[output]
directory = {out}
snapshot_interval = 5
"""


def write_cfg(path, out_dir, algorithm="", base=None):
    # extra algorithm keys go inside the existing section
    text = (base or BASE).format(out=out_dir)
    if algorithm:
        text = text.replace("seed = 0\n", f"seed = 0\n{algorithm}\n")
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "run.cfg", root / "out")
    return {"root": root, "cfg": cfg, "out": root / "out"}


@pytest.fixture(scope="module")
def tables_ready(ws):
    assert main(["precompute-td", ws["cfg"]]) == 0
    return ws


def test_argparse_usage_errors():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["optimize", "x.cfg", "--mode", "bogus"])
    assert e.value.code == 2


def test_missing_config(tmp_path):
    assert main(["precompute-td", str(tmp_path / "nope.cfg")]) == 2


def test_unknown_config_key(tmp_path):
    cfg = write_cfg(tmp_path / "bad.cfg", tmp_path / "o",
                    algorithm="step_sizes = 3")
    assert main(["optimize", cfg]) == 2


def test_invalid_thread_cap(ws):
    assert main(["--threads", "0", "precompute-td", ws["cfg"]]) == 2


def test_single_abscissa_rejected(tmp_path):
    cfg = write_cfg(tmp_path / "one.cfg", tmp_path / "o",
                    base=BASE.replace("n_t = 5", "n_t = 1"))
    assert main(["precompute-td", cfg]) == 2


def test_precompute_audit_output(tables_ready, capsys):
    ws = tables_ready
    # rerun is cheap at this size and overwrites in place
    assert main(["precompute-td", ws["cfg"]]) == 0
    out = capsys.readouterr().out
    for fname in ("iron_to_air.rtotd", "air_to_iron.rtotd"):
        assert (ws["out"] / "tables" / fname).exists()
        assert fname in out
    line = [l for l in out.splitlines() if "slope audit" in l]
    assert len(line) == 1
    assert float(line[0].split()[-1]) < 0.05


def test_optimize_missing_tables(tmp_path):
    cfg = write_cfg(tmp_path / "fresh.cfg", tmp_path / "empty")
    assert main(["optimize", cfg]) == 2


SUMMARY_KEYS = {"evaluations", "final_objective", "format", "iron_fraction",
                "iterations", "scenario", "status", "trace_rows",
                "worst_parameters"}


def read_artifacts(rundir):
    trace = (rundir / "trace.csv").read_text()
    summary = json.loads((rundir / "summary.json").read_text())
    final = (rundir / "final.rtols").read_bytes()
    return trace, summary, final


def strip_wall(trace):
    rows = trace.splitlines()
    out = [rows[0]]
    for row in rows[1:]:
        f = row.split(",")
        del f[5]
        out.append(",".join(f))
    return "\n".join(out)


def test_optimize_nominal_artifacts(tables_ready, capsys):
    ws = tables_ready
    rc = main(["optimize", ws["cfg"], "--mode", "nominal"])
    assert rc in (0, 4)
    rundir = ws["out"] / "nominal"
    trace, summary, final = read_artifacts(rundir)
    assert trace.splitlines()[0] == TRACE_HEADER
    assert len(trace.splitlines()) == summary["trace_rows"] + 1
    assert set(summary) == SUMMARY_KEYS
    assert summary["format"] == "RTOSUMMARY1"
    assert summary["scenario"] == "ANG"
    assert summary["status"] in ("converged", "stalled", "max_iterations")
    assert (rc == 4) == (summary["status"] == "stalled")
    assert 0.0 <= summary["iron_fraction"] <= 1.0
    assert summary["worst_parameters"] == [np.deg2rad(-60.0)]
    assert final.startswith(b"RTOLS1\n")
    svg = (rundir / "design_final.svg").read_text()
    assert svg.lstrip().startswith("<svg")
    assert (rundir / "design_0000.svg").exists()          # snapshot at k=0
    assert (rundir / "checkpoint.rtols").exists()
    assert json.loads(capsys.readouterr().out.rsplit("artifacts in", 1)[0]) \
        == summary


def test_optimize_rerun_bitwise_identical(tables_ready):
    ws = tables_ready
    rundir = ws["out"] / "nominal"
    first = read_artifacts(rundir)
    assert main(["optimize", ws["cfg"], "--mode", "nominal"]) in (0, 4)
    second = read_artifacts(rundir)
    assert strip_wall(first[0]) == strip_wall(second[0])
    assert first[1] == second[1]
    assert first[2] == second[2]


def test_optimize_robust_artifacts(tables_ready):
    ws = tables_ready
    rc = main(["optimize", ws["cfg"], "--mode", "robust"])
    assert rc in (0, 4)
    _, summary, _ = read_artifacts(ws["out"] / "robust")
    (q,) = summary["worst_parameters"]
    assert np.deg2rad(-75.0) - 1e-12 <= q <= np.deg2rad(-45.0) + 1e-12


def test_robust_needs_uncertainty(tables_ready, tmp_path):
    ws = tables_ready
    # NOM scenario has no uncertainty set; tables are compatible with it
    # only when the knee mode matches, so reuse the linear recipe
    cfg = write_cfg(tmp_path / "nom.cfg", ws["out"],
                    base=BASE.replace("name = ANG", "name = NOM")
                            .replace("q_hat_deg = -60", "")
                            .replace("interval_deg = -75, -45", ""))
    assert main(["optimize", cfg, "--mode", "robust"]) == 2


def test_corrupt_table_rejected(tables_ready, tmp_path):
    ws = tables_ready
    out2 = tmp_path / "out2"
    (out2 / "tables").mkdir(parents=True)
    for fname in ("iron_to_air.rtotd", "air_to_iron.rtotd"):
        shutil.copy(ws["out"] / "tables" / fname, out2 / "tables" / fname)
    (out2 / "tables" / "iron_to_air.rtotd").write_text("garbage\n")
    cfg = write_cfg(tmp_path / "c.cfg", out2)
    assert main(["optimize", cfg]) == 2


def test_law_mismatch_rejected(tables_ready, tmp_path):
    ws = tables_ready
    # nonlinear iron law against tables sampled for the linear one
    cfg = write_cfg(tmp_path / "nl.cfg", ws["out"],
                    base=BASE.replace("iron_linear = true",
                                      "iron_linear = false"))
    assert main(["optimize", cfg]) == 2


def test_solver_failure_exit_code(tmp_path):
    # nonlinear iron cannot converge in a single Newton step
    cfg = write_cfg(tmp_path / "hard.cfg", tmp_path / "o",
                    base=BASE.replace("iron_linear = true",
                                      "iron_linear = false"),
                    algorithm="newton_max_iter = 1")
    assert main(["audit", cfg, "--kind", "fdcheck"]) == 3


def test_audit_sweep(tables_ready, capsys):
    ws = tables_ready
    assert main(["audit", ws["cfg"], "--kind", "sweep"]) == 0
    rows = (ws["out"] / "audit" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "q,objective,mean_torque"
    assert len(rows) == 32
    qs = np.array([float(r.split(",")[0]) for r in rows[1:]])
    assert qs[0] == pytest.approx(np.deg2rad(-75.0))
    assert qs[-1] == pytest.approx(np.deg2rad(-45.0))
    assert "worst grid point" in capsys.readouterr().out


def test_audit_sweep_rejects_nominal_scenario(tmp_path):
    cfg = write_cfg(tmp_path / "nom.cfg", tmp_path / "o",
                    base=BASE.replace("name = ANG", "name = NOM")
                            .replace("q_hat_deg = -60", "")
                            .replace("interval_deg = -75, -45", ""))
    assert main(["audit", cfg, "--kind", "sweep"]) == 2


def test_audit_fdcheck(tables_ready, capsys):
    ws = tables_ready
    assert main(["audit", ws["cfg"], "--kind", "fdcheck"]) == 0
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if "max relative error" in l][0]
    assert float(line.split()[-1]) <= 1e-6
    rows = (ws["out"] / "audit" / "fdcheck.csv").read_text().splitlines()
    assert rows[0] == "component,q,adjoint,central_fd,rel_error"
    assert len(rows) == 2


def test_audit_tdcheck(tables_ready, capsys):
    ws = tables_ready
    assert main(["audit", ws["cfg"], "--kind", "tdcheck"]) == 0
    assert "tdcheck: final relative discrepancies" in capsys.readouterr().out
    rows = (ws["out"] / "audit" / "tdcheck.csv").read_text().splitlines()
    assert rows[0].startswith("element,material,eps,")
    assert len(rows) == 16                                 # 5 probes, 3 radii
    for row in rows[1:]:
        assert row.split(",")[1] in ("'iron'", "'air'", "iron", "air")


def test_audit_missing_design_file(tables_ready, tmp_path):
    ws = tables_ready
    assert main(["audit", ws["cfg"], "--kind", "sweep",
                 "--design", str(tmp_path / "ghost.rtols")]) == 2


def test_render_roundtrip(tables_ready, tmp_path):
    ws = tables_ready
    design = ws["out"] / "nominal" / "final.rtols"
    out = tmp_path / "pic.svg"
    assert main(["render", ws["cfg"], "--design", str(design),
                 "--out", str(out)]) == 0
    assert out.read_text().lstrip().startswith("<svg")
    # default output lands next to the design file
    assert main(["render", ws["cfg"], "--design", str(design)]) == 0
    assert design.with_suffix(".svg").exists()
    assert main(["render", ws["cfg"],
                 "--design", str(tmp_path / "none.rtols")]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    from rtopt.config import load_config

    cfg = write_cfg(tmp_path / "rel.cfg", "rel/dir")
    monkeypatch.setenv("RTOPT_OUTPUT_ROOT", str(tmp_path / "root"))
    assert load_config(cfg).output_dir == str(tmp_path / "root" / "rel" / "dir")
    monkeypatch.delenv("RTOPT_OUTPUT_ROOT")
    assert load_config(cfg).output_dir == "rel/dir"
