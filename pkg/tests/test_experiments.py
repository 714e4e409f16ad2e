import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakdyn import cli
from weakdyn.errors import DegenerateFit, ZeroReference
from weakdyn.estimator1d import euler_truncation
from weakdyn.experiments import (ExperimentSpec, calibrate_affine, rel_l2_error, strong_vs_weak, thread_cap,
                                 weak_sweep, write_rows)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestRelL2:
    def test_examples(self):
        x = np.random.default_rng(0).normal(size=(3, 10, 2))
        assert rel_l2_error(x, x) == 0.0
        assert rel_l2_error(x, 2 * x) == pytest.approx(1.0, rel=1e-15)
        assert rel_l2_error([[3.0], [4.0]], [[3.0], [0.0]]) == pytest.approx(0.8, rel=1e-15)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 8, 3)), rng.normal(size=(5, 8, 3))
        perm = rng.permutation(5)
        assert rel_l2_error(a[perm], b[perm]) == pytest.approx(rel_l2_error(a, b), rel=1e-14)

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))
        total = 0.0
        for i in range(2):
            for j in range(3):
                total += np.sqrt(sum((a[i, k, j] - b[i, k, j]) ** 2 for k in range(6))
                                 / sum(a[i, k, j] ** 2 for k in range(6)))
        assert rel_l2_error(a, b) == pytest.approx(total / 6, rel=1e-14)

    def test_errors(self):
        with pytest.raises(ZeroReference):
            rel_l2_error(np.zeros((1, 4, 1)), np.ones((1, 4, 1)))
        with pytest.raises(ValueError):
            rel_l2_error(np.ones((1, 4, 1)), np.ones((1, 5, 1)))


class TestCalibration:
    def test_examples(self):
        t = np.linspace(0, 1, 11)
        a, b, cal = calibrate_affine(t, t)
        assert (a, b) == pytest.approx((1.0, 0.0), abs=1e-14)
        a, b, cal = calibrate_affine(2 * t + 3, t)
        assert (a, b) == pytest.approx((0.5, -1.5), abs=1e-14)
        np.testing.assert_allclose(cal, t, atol=1e-14)

    @given(st.integers(0, 2**31), st.floats(-10, 10).filter(lambda v: abs(v) > 1e-2), st.floats(-10, 10),
           st.sampled_from([None, 0, 3]))
    @settings(max_examples=50, deadline=None)
    def test_exact_for_affine_maps(self, seed, a, b, anchor):
        truth = np.random.default_rng(seed).normal(size=20)
        learned = (truth - b) / a
        a_fit, b_fit, cal = calibrate_affine(learned, truth, anchor)
        np.testing.assert_allclose(cal, truth, atol=1e-10 * (1 + abs(b)))

    def test_anchor_is_exact(self):
        rng = np.random.default_rng(0)
        learned, truth = rng.normal(size=30), rng.normal(size=30)
        _, _, cal = calibrate_affine(learned, truth, anchor=0)
        assert cal[0] == truth[0]

    def test_least_squares_oracle(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=40), rng.normal(size=40)
        a, b, _ = calibrate_affine(x, y)
        a_ref, b_ref = np.polyfit(x, y, 1)
        assert (a, b) == pytest.approx((a_ref, b_ref), rel=1e-10)

    def test_errors(self):
        with pytest.raises(DegenerateFit):
            calibrate_affine(np.ones(5), np.arange(5.0))
        with pytest.raises(ValueError):
            calibrate_affine([1.0], [2.0])


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path):
        vals = np.random.default_rng(0).normal(size=(50, 3)) * np.logspace(-300, 300, 50)[:, None]
        path = write_rows(tmp_path / "x.csv", ["a", "b", "c"], vals)
        back = np.array([[float(v) for v in r] for r in read_rows(path)[1:]])
        assert np.array_equal(back, vals)


class TestSweeps:
    def test_weak_error_decreases_with_support(self):
        _, summary = weak_sweep(-2.0, [1e-2], [0.25, 1.0, 4.0], 400, 0)
        mean_abs = [row[3] for row in summary]
        assert mean_abs[0] > mean_abs[1] > mean_abs[2]

    def test_small_noise_limits_on_same_data(self):
        # strong tends to the Euler truncation error, weak tends to zero
        rows = strong_vs_weak(-2.0, [1e-3, 1e-5], 200, 0)
        mean = {(s, f): np.mean([r[3] for r in rows if r[0] == s and r[1] == f]) for s in (1e-3, 1e-5)
                for f in ("strong", "weak")}
        trunc = euler_truncation(-2.0, 0.01) / -2.0
        assert abs(mean[1e-5, "strong"] - trunc) < 1e-3 * abs(trunc) + 1e-5
        assert abs(mean[1e-5, "weak"]) < 1e-4
        assert abs(mean[1e-5, "weak"]) < abs(mean[1e-3, "weak"]) + 1e-4
        assert abs(mean[1e-5, "weak"]) < abs(mean[1e-5, "strong"]) / 100


class TestSpec:
    def test_unknown_kind_and_params(self):
        with pytest.raises(ValueError):
            ExperimentSpec("plot")
        with pytest.raises(ValueError):
            ExperimentSpec("crossing", {"bogus": 1})

    def test_serializable(self):
        spec = ExperimentSpec("crossing", {"streams": 3}, "x", 4)
        back = ExperimentSpec(**json.loads(json.dumps(spec.to_dict())))
        assert back == spec


SMALL = {
    "gen-data": ["--n-traj", "2", "--K", "20"],
    "estimate-strong": ["--sigmas", "1e-2", "--dts", "1e-3,1e-2", "--runs", "20"],
    "estimate-weak": ["--S", "0.5..2", "--runs", "20"],
    "crossing": ["--streams", "3"],
}


class TestRun:
    @pytest.mark.parametrize("kind", sorted(SMALL))
    def test_rerun_is_byte_identical(self, tmp_path, kind):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main([kind, "--seed", "3", "--out", str(out)] + SMALL[kind]) == 0
            outs.append(out)
        manifest = json.loads((outs[0] / "manifest.json").read_text())
        assert manifest["spec"]["kind"] == kind and manifest["spec"]["seed"] == 3
        assert manifest["outputs"]
        for rel in manifest["outputs"]:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()

    def test_estimate_strong_csv(self, tmp_path):
        assert cli.main(["estimate-strong", "--out", str(tmp_path)] + SMALL["estimate-strong"]) == 0
        rows = read_rows(tmp_path / "strong_rel_error.csv")
        assert rows[0] == ["dt", "sigma", "run", "rel_error"]
        assert len(rows) == 1 + 2 * 20
        summary = read_rows(tmp_path / "strong_summary.csv")
        assert len(summary) == 3

    def test_log_range_steps_are_snapped(self, tmp_path):
        assert cli.main(["estimate-strong", "--out", str(tmp_path), "--sigmas", "1e-2", "--dts", "1e-3..1e-1",
                         "--runs", "2"]) == 0
        dts = json.loads((tmp_path / "manifest.json").read_text())["results"]["dts"]
        assert dts[0] == 1e-3 and dts[-1] == 0.1
        assert all(abs(1 / d - round(1 / d)) < 1e-9 for d in dts)

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"streams": 2, "sigma": 0.02, "seed": 5}))
        assert cli.main(["crossing", "--config", str(cfg), "--streams", "4", "--out", str(tmp_path / "o")]) == 0
        spec = json.loads((tmp_path / "o" / "manifest.json").read_text())["spec"]
        assert spec["seed"] == 5 and spec["params"]["streams"] == 4 and spec["params"]["sigma"] == 0.02

    def test_thread_cap(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WEAKDYN_THREADS", "3")
        assert thread_cap() == 3
        assert cli.main(["estimate-weak", "--out", str(tmp_path / "t3")] + SMALL["estimate-weak"]) == 0
        assert json.loads((tmp_path / "t3" / "manifest.json").read_text())["threads"] == 3
        monkeypatch.setenv("WEAKDYN_THREADS", "1")
        assert cli.main(["estimate-weak", "--out", str(tmp_path / "t1")] + SMALL["estimate-weak"]) == 0
        for name in ("weak_rel_error.csv", "strong_vs_weak.csv"):
            assert (tmp_path / "t3" / name).read_bytes() == (tmp_path / "t1" / name).read_bytes()
        monkeypatch.setenv("WEAKDYN_THREADS", "zero")
        assert thread_cap() == 1

    def test_train_compare_and_evaluate(self, tmp_path):
        out = tmp_path / "tc"
        args = ["train-compare", "--out", str(out), "--iters", "3", "--n-train", "2"]
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"K": 30, "n_test": 2, "model": {"hidden": 6, "layers": 2}}))
        assert cli.main(args + ["--config", str(cfg)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        for name in ("train_compare.csv", "history_strong.csv", "history_weak.csv", "model_weak.npz",
                     "weak_potentials.csv", "test_data/traj_0000.csv"):
            assert name in manifest["outputs"]
        summary = read_rows(out / "train_compare.csv")
        assert [r[0] for r in summary[1:]] == ["strong", "weak"]
        assert float(summary[2][1]) == manifest["results"]["weak"]["rel_l2_error"]
        assert len(read_rows(out / "history_weak.csv")) == 4

        ev = tmp_path / "ev"
        assert cli.main(["evaluate", "--model", str(out / "model_weak.npz"), "--data", str(out / "test_data"),
                         "--out", str(ev)]) == 0
        row = read_rows(ev / "evaluate.csv")[1]
        assert float(row[0]) == pytest.approx(manifest["results"]["weak"]["rel_l2_error"], rel=1e-12)


class TestExitCodes:
    def test_unknown_parameter_in_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert cli.main(["crossing", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == 2 and err["type"] == "ValueError"

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["crossing", "--config", str(tmp_path / "none.json")]) == 2

    def test_invalid_value(self, tmp_path):
        assert cli.main(["estimate-strong", "--runs", "0", "--out", str(tmp_path)]) == 2
        assert json.loads((tmp_path / "error.json").read_text())["exit_code"] == 2

    def test_evaluate_without_inputs(self, tmp_path):
        assert cli.main(["evaluate", "--out", str(tmp_path)]) == 2

    def test_argparse_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["estimate-strong", "--runs", "many"])
        assert err.value.code == 2

    def test_numerical_failure(self, tmp_path):
        # the three-point test function is undefined at lambda = 0
        assert cli.main(["estimate-weak", "--lambda", "0", "--runs", "2", "--out", str(tmp_path)]) == 3
        rec = json.loads((tmp_path / "error.json").read_text())
        assert rec["exit_code"] == 3 and rec["type"] == "DegenerateTestFunction"
