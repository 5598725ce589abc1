import json
import math
import subprocess
import sys

import pytest

from bicomp.cli import main


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def quad_config(**overrides):
    cfg = {
        "problem": {"kind": "quadratic", "dim": 4, "n_workers": 2, "seed": 1,
                     "style": "spread", "mu": 0.5, "L": 2.0, "hetero": 1.0},
        "algo": {"algo": "gd", "gamma": 0.25},
        "seed": 0,
        "rounds": 6,
    }
    cfg.update(overrides)
    return cfg


def randk_config(**overrides):
    cfg = quad_config()
    cfg["algo"] = {"algo": "ef21p_dcgd", "gamma": 0.05}
    cfg["compressors"] = {"dual": {"kind": "randk", "k": 1}, "primal": {"kind": "topk", "k": 2}}
    cfg.update(overrides)
    return cfg


def test_run_minimal_quadratic(tmp_path, capsys):
    cfg_path = write_config(tmp_path, quad_config())
    out_path = tmp_path / "m.csv"
    code = main(["run", "--config", cfg_path, "--out", str(out_path)])
    assert code == 0
    lines = out_path.read_text().strip().split("\n")
    assert len(lines) == 1 + 6 + 1  # header + T+1 rows
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "ok"
    assert summary["rounds"] == 6
    assert math.isfinite(summary["final_f"])


def test_run_rejects_contractive_dual(tmp_path, capsys):
    cfg = quad_config()
    cfg["algo"] = {"algo": "diana", "gamma": 0.1}
    cfg["compressors"] = {"dual": {"kind": "topk", "k": 1}}
    code = main(["run", "--config", write_config(tmp_path, cfg)])
    assert code == 1
    err = capsys.readouterr().err
    assert "unbiased" in err


def test_run_divergence_exit_code(tmp_path, capsys):
    cfg = quad_config()
    cfg["algo"] = {"algo": "gd", "gamma": 1e9}
    cfg["rounds"] = 50
    code = main(["run", "--config", write_config(tmp_path, cfg),
                 "--out", str(tmp_path / "d.csv")])
    assert code == 2


def test_seed_override_changes_random_runs_only(tmp_path, capsys):
    cfg_path = write_config(tmp_path, randk_config())
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", cfg_path, "--seed", "1", "--out", str(a)]) == 0
    assert main(["run", "--config", cfg_path, "--seed", "2", "--out", str(b)]) == 0
    assert a.read_text() != b.read_text()

    det = quad_config()
    det["algo"] = {"algo": "ef21p", "gamma": 0.05}
    det["compressors"] = {"primal": {"kind": "topk", "k": 2}}
    det_path = write_config(tmp_path, det, "det.json")
    c, d = tmp_path / "c.csv", tmp_path / "dd.csv"
    assert main(["run", "--config", det_path, "--seed", "1", "--out", str(c)]) == 0
    assert main(["run", "--config", det_path, "--seed", "2", "--out", str(d)]) == 0
    assert c.read_text() == d.read_text()
    capsys.readouterr()


def test_constants_report(tmp_path, capsys):
    cfg = {
        "problem": {"kind": "quadratic", "dim": 2, "n_workers": 2, "seed": 0,
                     "style": "identity", "mu": 1.0, "hetero": 1.0},
        "algo": {"algo": "ef21p_diana", "gamma": "theory", "beta": "theory"},
        "compressors": {"dual": {"kind": "randk", "k": 1}, "primal": {"kind": "topk", "k": 1}},
        "rounds": 5,
        "theory": {"eps": 0.01, "sigma_sq": 0.5, "D": 4.0},
    }
    code = main(["constants", "--config", write_config(tmp_path, cfg)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["lemma_audit"]["all_ok"]
    assert report["beta"] == 0.5  # omega = d/k - 1 = 1
    assert "shift_strongly_convex" in report["gamma_bounds"]
    assert set(report["abc"]) == {"full_grad", "strong_growth", "bounded_var", "homogeneous"}
    assert "zero_shift_neighborhood" in report


def test_constants_identity_compressors(tmp_path, capsys):
    cfg = quad_config()
    code = main(["constants", "--config", write_config(tmp_path, cfg)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["inputs"]["omega"] == 0.0
    assert report["inputs"]["alpha"] == 1.0
    assert report["beta"] == 1.0
    bounds = report["gamma_bounds"]["shift_strongly_convex"]["terms"]
    assert bounds["uplink_variance"] == math.inf
    assert bounds["mixed"] == math.inf


def test_sweep_cli(tmp_path, capsys):
    cfg = randk_config(rounds=20)
    code = main(["sweep", "--config", write_config(tmp_path, cfg),
                 "--grid-min", "-4", "--grid-max", "0",
                 "--out", str(tmp_path / "sweep.json")])
    assert code == 0
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert len(report["cells"]) == 5
    capsys.readouterr()


def test_report_merge_and_axes(tmp_path, capsys):
    cfg_path = write_config(tmp_path, randk_config(rounds=10))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", cfg_path, "--seed", "1", "--out", str(a)]) == 0
    assert main(["run", "--config", cfg_path, "--seed", "2", "--out", str(b)]) == 0
    merged = tmp_path / "merged.csv"
    code = main(["report", "--inputs", str(a), str(b), "--labels", "one", "two",
                 "--x", "total_coords", "--out", str(merged)])
    assert code == 0
    lines = merged.read_text().strip().split("\n")
    n_a = len(a.read_text().strip().split("\n")) - 1
    n_b = len(b.read_text().strip().split("\n")) - 1
    assert len(lines) == 1 + n_a + n_b
    capsys.readouterr()


def test_report_single_passthrough(tmp_path, capsys):
    cfg_path = write_config(tmp_path, quad_config())
    a = tmp_path / "a.csv"
    assert main(["run", "--config", cfg_path, "--out", str(a)]) == 0
    capsys.readouterr()
    code = main(["report", "--inputs", str(a), "--x", "round"])
    assert code == 0
    out = capsys.readouterr().out
    src_rows = a.read_text().strip().split("\n")[1:]
    merged_rows = out.strip().split("\n")[1:]
    for src, mg in zip(src_rows, merged_rows):
        s = src.split(",")
        m = mg.split(",")
        assert m[1] == s[0] and m[2] == s[1] and m[3] == s[2]


def test_report_downlink_axis_compression_factor(tmp_path, capsys):
    base = {
        "problem": {"kind": "quadratic", "dim": 20, "n_workers": 4, "seed": 2,
                     "style": "identity", "mu": 1.0, "hetero": 1.0},
        "seed": 0,
        "rounds": 5,
    }
    diana = dict(base)
    diana["algo"] = {"algo": "diana", "gamma": 0.01, "beta": "theory"}
    diana["compressors"] = {"dual": {"kind": "randk", "k": 2}}
    bidir = dict(base)
    bidir["algo"] = {"algo": "ef21p_diana", "gamma": 0.01, "beta": "theory"}
    bidir["compressors"] = {"dual": {"kind": "randk", "k": 2},
                             "primal": {"kind": "topk", "k": 2}}
    a, b = tmp_path / "diana.csv", tmp_path / "bidir.csv"
    assert main(["run", "--config", write_config(tmp_path, diana, "d.json"), "--out", str(a)]) == 0
    assert main(["run", "--config", write_config(tmp_path, bidir, "b.json"), "--out", str(b)]) == 0
    rows_a = [r.split(",") for r in a.read_text().strip().split("\n")[1:]]
    rows_b = [r.split(",") for r in b.read_text().strip().split("\n")[1:]]
    for ra, rb in zip(rows_a[1:], rows_b[1:]):
        assert int(ra[7]) == int(rb[7]) * (20 // 2)
    capsys.readouterr()


def test_report_header_mismatch(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    code = main(["report", "--inputs", str(bad)])
    assert code == 1
    assert "header" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.json")])
    assert code == 1


def test_console_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "bicomp.cli", "--help"], capture_output=True, text=True
    )
    assert out.returncode == 0
    assert "run" in out.stdout and "constants" in out.stdout
