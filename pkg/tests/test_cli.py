"""End-to-end tests for the command-line interface."""

import json

import numpy as np
import pytest

from ebtrend.cli import main
from ebtrend.simharness import SimConfig, gen_setting


def write_matrix(path, y, unit_ids=None, col_names=None):
    n, k = y.shape
    unit_ids = unit_ids or [f"u{i}" for i in range(n)]
    col_names = col_names or [f"s{j}" for j in range(k)]
    with open(path, "w") as fh:
        fh.write("unit\t" + "\t".join(col_names) + "\n")
        for uid, row in zip(unit_ids, y):
            fh.write(uid + "\t" + "\t".join(f"{v:.10g}" for v in row) + "\n")
    return str(path)


def write_design(path, x, names=None):
    k, p = x.shape
    names = names or [f"c{j}" for j in range(p)]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in x:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    return str(path)


def two_group_x(k1, k2):
    x = np.zeros((k1 + k2, 2))
    x[:k1, 0] = 1.0
    x[k1:, 1] = 1.0
    return x


@pytest.fixture
def small_data(tmp_path):
    cfg = SimConfig(n=300, n0=270, k_a=3, k_b=3,
                    prior_g=("two_point", 1.0, 10.0, 0.5),
                    trend_m=("constant", 0.0), mu_mean=20.0,
                    mu_sd=np.sqrt(3.0), seed=5)
    ds = gen_setting(cfg, rep=0)
    matrix = write_matrix(tmp_path / "matrix.tsv", ds.y)
    design = write_design(tmp_path / "design.csv", two_group_x(3, 3))
    return matrix, design, tmp_path


class TestAnalyze:
    def test_smoke(self, small_data):
        matrix, design, tmp = small_data
        out = tmp / "out"
        code = main(["analyze", "--matrix", matrix, "--design", design,
                     "--contrast", "theta=1,-1",
                     "--methods", "ttest,reg_npmle,map",
                     "--out", str(out)])
        assert code == 0
        lines = (out / "analyze.tsv").read_text().splitlines()
        header = lines[0].split("\t")
        assert header[0] == "unit_id"
        assert "p_ttest" in header and "q_reg_npmle" in header
        assert len(lines) == 301
        body = np.array([[float(v) for v in ln.split("\t")[1:]]
                         for ln in lines[1:]])
        assert np.all((body >= 0) & (body <= 1))

    def test_byte_identical_reruns_and_threads(self, small_data):
        matrix, design, tmp = small_data
        outputs = []
        for name, threads in (("o1", None), ("o2", None), ("o3", "1"),
                              ("o4", "2")):
            argv = ["analyze", "--matrix", matrix, "--design", design,
                    "--contrast", "theta=1,-1",
                    "--methods", "ttest,untrended_npmle,reg_npmle",
                    "--out", str(tmp / name)]
            if threads is not None:
                argv = ["--threads", threads] + argv
            assert main(argv) == 0
            outputs.append((tmp / name / "analyze.tsv").read_bytes())
        assert all(o == outputs[0] for o in outputs[1:])

    def test_joint_requires_intensity_side(self, small_data, tmp_path):
        matrix, design, tmp = small_data
        # external side column makes the joint method inapplicable
        rng = np.random.default_rng(0)
        y = np.exp(rng.normal(3, 0.3, (50, 7)))
        m = write_matrix(tmp_path / "m2.tsv", y,
                         col_names=[f"s{j}" for j in range(6)] + ["mcol"])
        code = main(["analyze", "--matrix", m, "--design", design,
                     "--contrast", "theta=1,-1", "--side", "column:mcol",
                     "--methods", "joint_npmle", "--out", str(tmp / "oj")])
        assert code == 4

    def test_missing_file(self, small_data):
        matrix, design, tmp = small_data
        code = main(["analyze", "--matrix", str(tmp / "nope.tsv"),
                     "--design", design, "--contrast", "theta=1,-1",
                     "--out", str(tmp / "o")])
        assert code == 2

    def test_bad_method_name(self, small_data):
        matrix, design, tmp = small_data
        code = main(["analyze", "--matrix", matrix, "--design", design,
                     "--contrast", "theta=1,-1", "--methods", "bogus",
                     "--out", str(tmp / "o")])
        assert code == 2

    def test_orthogonality_gate_and_override(self, tmp_path):
        # the constant vector is outside this design's column space, so
        # conditioning on the average intensity is not licensed
        rng = np.random.default_rng(1)
        y = np.exp(rng.normal(3, 0.3, (60, 4)))
        matrix = write_matrix(tmp_path / "m.tsv", y)
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])
        design = write_design(tmp_path / "d.csv", x)
        base = ["analyze", "--matrix", matrix, "--design", design,
                "--contrast", "theta=1,-1", "--methods", "reg_npmle"]
        assert main(base + ["--out", str(tmp_path / "o1")]) == 3
        assert main(base + ["--allow-nonorthogonal",
                            "--out", str(tmp_path / "o2")]) == 0
        # untrended methods pass through the gate untouched
        assert main(["analyze", "--matrix", matrix, "--design", design,
                     "--contrast", "theta=1,-1", "--methods", "ttest",
                     "--out", str(tmp_path / "o3")]) == 0


class TestSimulate:
    def test_smoke_with_per_rep(self, tmp_path):
        out = tmp_path / "sim"
        code = main(["simulate", "--preset", "setting1", "--n", "300",
                     "--reps", "2", "--methods", "ttest,untrended_npmle",
                     "--out", str(out), "--per-rep"])
        assert code == 0
        lines = (out / "simulate.tsv").read_text().splitlines()
        assert lines[0] == "method\tfdr\tfdr_se\tpower\tpower_se"
        assert len(lines) == 3
        reps = (out / "replicates.tsv").read_text().splitlines()
        assert reps[0] == "method\trep\tv\tr\tfdp\tpower"
        assert len(reps) == 1 + 2 * 2

    def test_skipped_methods_marked(self, tmp_path):
        out = tmp_path / "sim4"
        code = main(["simulate", "--preset", "setting4", "--n", "300",
                     "--reps", "1", "--methods", "ttest,joint_npmle",
                     "--out", str(out)])
        assert code == 0
        rows = dict(ln.split("\t", 1) for ln in
                    (out / "simulate.tsv").read_text().splitlines()[1:])
        assert rows["joint_npmle"].startswith("--")
        assert not rows["ttest"].startswith("--")

    def test_unknown_preset(self, tmp_path):
        assert main(["simulate", "--preset", "setting9",
                     "--out", str(tmp_path / "o")]) == 2

    def test_deterministic(self, tmp_path):
        argv = ["simulate", "--preset", "setting1", "--n", "250", "--reps",
                "2", "--methods", "ttest,reg_npmle"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert ((tmp_path / "a" / "simulate.tsv").read_bytes()
                == (tmp_path / "b" / "simulate.tsv").read_bytes())


class TestCheckDesign:
    def test_balanced_ok(self, tmp_path, capsys):
        design = write_design(tmp_path / "d.csv", two_group_x(3, 3))
        code = main(["check-design", "--design", design,
                     "--contrast", "theta=1,-1"])
        payload = json.loads(capsys.readouterr().out)
        assert code == 0
        assert payload["ok"] is True
        assert abs(payload["c_theta_gram_c_A"]) <= 1e-12

    def test_unbalanced_fails_with_value(self, tmp_path, capsys):
        # [DERIVED] K = 2 vs 10 with the tilde side contrast (0.5, 0.5):
        # c_theta' (X'X)^-1 c_side = (1/2 - 1/10)/2 = 0.2
        design = write_design(tmp_path / "d.csv", two_group_x(2, 10))
        code = main(["check-design", "--design", design,
                     "--contrast", "theta=1,-1",
                     "--side-contrast", "tilde=0.5,0.5",
                     "--out", str(tmp_path / "o")])
        payload = json.loads((tmp_path / "o" / "check_design.json").read_text())
        assert code == 3
        assert payload["ok"] is False
        assert payload["c_theta_gram_c_A"] == pytest.approx(0.2, abs=1e-12)

    def test_no_intercept_flagged(self, tmp_path, capsys):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])
        design = write_design(tmp_path / "d.csv", x)
        code = main(["check-design", "--design", design,
                     "--contrast", "theta=1,-1"])
        payload = json.loads(capsys.readouterr().out)
        assert code == 3
        assert payload["ones_in_colspace"] is False

    def test_rank_deficient_design(self, tmp_path):
        x = np.ones((4, 2))
        design = write_design(tmp_path / "d.csv", x)
        assert main(["check-design", "--design", design,
                     "--contrast", "theta=1,-1"]) == 3


class TestDiagnose:
    def test_outputs(self, small_data):
        matrix, design, tmp = small_data
        out = tmp / "diag"
        code = main(["diagnose", "--matrix", matrix, "--design", design,
                     "--contrast", "theta=1,-1", "--out", str(out)])
        assert code == 0

        trend_lines = (out / "trend.tsv").read_text().splitlines()
        assert trend_lines[0] == "m\tm_hat\txi2_hat"
        assert len(trend_lines) == 201

        prior_lines = (out / "prior_reg_npmle.tsv").read_text().splitlines()
        w = np.array([float(ln.split("\t")[1]) for ln in prior_lines[1:]])
        assert w.sum() == pytest.approx(1.0, abs=1e-8)

        marg = (out / "marginal_density.tsv").read_text().splitlines()
        assert len(marg) == 401
        cols = np.array([[float(v) for v in ln.split("\t")] for ln in marg[1:]])
        # fitted density integrates to ~1 over the plotted range (trapezoid)
        integral = np.trapezoid(cols[:, 1], cols[:, 0])
        assert integral == pytest.approx(1.0, abs=2e-2)
        # histogram counts cover all positive-variance units
        assert int(cols[:, 2].sum()) == 300

        inv = json.loads((out / "invchisq.json").read_text())
        assert inv["s0_sq"] > 0
