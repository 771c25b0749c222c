"""Tests for the command-line interface: artifact formats, precision
rules, exit codes, and byte reproducibility."""

import json
import math
import subprocess
import sys

import pytest

from regla.cli import dispatch
from regla.lm.checkpoint import load_checkpoint
from regla.variance import simulate_inner_product_std

SMALL_MODEL = [
    "--layers", "2", "--heads", "2", "--head-dim", "8", "--mlp-dim", "32",
]


def _read_csv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


class TestDispatchUsage:
    def test_no_arguments_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            dispatch([])
        assert info.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            dispatch(["frobnicate"])
        assert info.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            dispatch(["variance", "--wat", "1"])
        assert info.value.code == 2


class TestVarianceCommand:
    def test_writes_csv_with_expected_grid(self, tmp_path):
        out = tmp_path / "var.csv"
        rc = dispatch(["variance", "--d", "4,8", "--n", "5000", "--out", str(out)])
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["d", "feature", "n", "empirical_std", "theoretical_std", "ratio"]
        assert [(r[0], r[1]) for r in rows] == [
            ("4", "identity"), ("8", "identity"), ("4", "exp"), ("8", "exp")
        ]

    def test_csv_floats_roundtrip_through_repr(self, tmp_path):
        """Cells are full-precision reprs: parsing one recovers the float."""
        out = tmp_path / "var.csv"
        dispatch(["variance", "--d", "8", "--feature", "exp", "--n", "4000",
                  "--seed", "3", "--out", str(out)])
        _, rows = _read_csv(out)
        emp = float(rows[0][3])
        assert emp == simulate_inner_product_std(8, "exp", n_samples=4000, seed=3)

    def test_stdout_when_no_out_flag(self, capsys):
        rc = dispatch(["variance", "--d", "4", "--feature", "identity", "--n", "1000"])
        assert rc == 0
        text = capsys.readouterr().out
        assert text.startswith("d,feature,n,")
        assert text.endswith("\n")

    def test_byte_reproducible_given_seed(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["variance", "--d", "4,16", "--n", "3000", "--seed", "7"]
        assert dispatch(argv + ["--out", str(a)]) == 0
        assert dispatch(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        dispatch(["variance", "--d", "4", "--n", "3000", "--seed", "0", "--out", str(a)])
        dispatch(["variance", "--d", "4", "--n", "3000", "--seed", "1", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_rejects_f32(self):
        assert dispatch(["variance", "--precision", "f32", "--n", "100"]) == 2

    def test_rejects_malformed_dims(self):
        assert dispatch(["variance", "--d", "4,x"]) == 2

    def test_rejects_shifted_identity(self):
        assert dispatch(["variance", "--feature", "identity", "--shifted", "--n", "100"]) == 2


class TestGatesCommand:
    def test_curves_pin_known_points(self, tmp_path):
        out = tmp_path / "curves.csv"
        rc = dispatch(["gates", "--curves", "--g-grid", "0.9,0.95", "--r-grid", "0.0",
                       "--out", str(out)])
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["g", "r", "grad_refined", "grad_vanilla"]
        by_g = {float(r[0]): (float(r[2]), float(r[3])) for r in rows}
        assert math.isclose(by_g[0.9][0], 0.162, rel_tol=1e-12)
        assert math.isclose(by_g[0.9][1], 0.09, rel_tol=1e-12)
        assert math.isclose(by_g[0.95][0], 0.09025, rel_tol=1e-12)

    def test_curves_reject_f32(self):
        assert dispatch(["gates", "--curves", "--precision", "f32"]) == 2

    def test_curves_and_hist_mutually_exclusive(self):
        with pytest.raises(SystemExit) as info:
            dispatch(["gates", "--curves", "--hist"])
        assert info.value.code == 2
        with pytest.raises(SystemExit) as info:
            dispatch(["gates"])
        assert info.value.code == 2

    def test_hist_emits_pre_and_post_phases(self, tmp_path):
        out = tmp_path / "hist.csv"
        rc = dispatch(
            ["gates", "--hist", "--vocab", "33", *SMALL_MODEL,
             "--steps", "5", "--eval-every", "5", "--batch", "4",
             "--bins", "10", "--bias", "6.0", "--out", str(out)]
        )
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["layer", "bin_lo", "bin_hi", "count", "phase"]
        phases = {r[4] for r in rows}
        assert phases == {"pre", "post"}
        pre = [r for r in rows if r[4] == "pre" and r[0] == "0"]
        assert len(pre) == 10
        assert sum(int(r[3]) for r in pre) > 0
        assert float(pre[0][1]) == 0.0 and float(pre[-1][2]) == 1.0

    def test_hist_negative_bias_fills_bottom_bin(self, tmp_path):
        out = tmp_path / "hist.csv"
        dispatch(
            ["gates", "--hist", "--vocab", "33", *SMALL_MODEL,
             "--steps", "1", "--eval-every", "1", "--batch", "4",
             "--bins", "10", "--bias", "-6.0", "--out", str(out)]
        )
        _, rows = _read_csv(out)
        pre = [r for r in rows if r[4] == "pre" and r[0] == "0"]
        counts = [int(r[3]) for r in pre]
        assert counts[0] / sum(counts) > 0.95


class TestEquivCommand:
    def test_regla_passes_and_reports_diffs(self, tmp_path):
        out = tmp_path / "equiv.json"
        rc = dispatch(["equiv", "--gate", "regla", "--d", "4", "--len", "16",
                       "--chunk", "1,4", "--instances", "2", "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["passed"] is True
        assert report["max_abs_diff"] <= 1e-8
        assert set(report["max_diffs"]) == {
            "parallel_vs_recurrent", "chunked_1_vs_recurrent", "chunked_4_vs_recurrent"
        }
        assert report["feature"] == "exp"

    def test_delta_rule_uses_literal_loop_oracle(self, tmp_path):
        out = tmp_path / "delta.json"
        rc = dispatch(["equiv", "--gate", "delta_rule", "--d", "4", "--len", "16",
                       "--instances", "2", "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["oracle"] == "literal_loop"
        assert report["tol"] == 1e-12
        assert report["passed"] is True

    def test_impossible_tolerance_fails_with_code_one(self, tmp_path):
        out = tmp_path / "equiv.json"
        rc = dispatch(["equiv", "--gate", "regla", "--d", "4", "--len", "16",
                       "--chunk", "4", "--instances", "1", "--tol", "1e-300",
                       "--out", str(out)])
        assert rc == 1
        assert json.loads(out.read_text())["passed"] is False

    def test_json_is_canonical(self, tmp_path):
        out = tmp_path / "equiv.json"
        dispatch(["equiv", "--gate", "none", "--d", "4", "--len", "8",
                  "--chunk", "4", "--instances", "1", "--out", str(out)])
        text = out.read_text()
        assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"

    def test_byte_reproducible(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        argv = ["equiv", "--gate", "fast_decay", "--d", "4", "--len", "12",
                "--chunk", "1,4", "--instances", "2", "--seed", "5"]
        assert dispatch(argv + ["--out", str(a)]) == 0
        assert dispatch(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestGradcheckCommand:
    def test_single_gate_passes(self, tmp_path):
        out = tmp_path / "grad.json"
        rc = dispatch(["gradcheck", "--gate", "none", "--d", "3", "--len", "6",
                       "--seeds", "1", "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["passed"] is True
        assert report["gates"]["none"]["max_rel_err"] < 1e-4
        assert report["gates"]["none"]["worst_param"]

    def test_impossible_tolerance_fails_with_code_one(self, tmp_path):
        out = tmp_path / "grad.json"
        rc = dispatch(["gradcheck", "--gate", "none", "--d", "3", "--len", "6",
                       "--seeds", "1", "--tol", "1e-30", "--out", str(out)])
        assert rc == 1
        assert json.loads(out.read_text())["passed"] is False

    def test_delta_rule_forced_recurrent(self, tmp_path):
        out = tmp_path / "grad.json"
        rc = dispatch(["gradcheck", "--gate", "delta_rule", "--feature", "elu1",
                       "--d", "3", "--len", "6", "--seeds", "1", "--mode", "chunked",
                       "--out", str(out)])
        assert rc == 0
        assert json.loads(out.read_text())["gates"]["delta_rule"]["mode"] == "recurrent"

    def test_rejects_f32(self):
        assert dispatch(["gradcheck", "--precision", "f32"]) == 2


class TestTrainCommand:
    def _train_args(self, extra=()):
        return ["train", "--task", "copy", "--seg-len", "4", "--symbols", "8",
                "--vocab", "9", *SMALL_MODEL, "--steps", "6", "--eval-every", "3",
                "--batch", "4", *extra]

    def test_metrics_csv_has_eval_rows(self, tmp_path):
        out = tmp_path / "metrics.csv"
        rc = dispatch(self._train_args(["--out", str(out)]))
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["step", "loss", "accuracy", "ppl"]
        assert [r[0] for r in rows] == ["0", "3", "6"]
        assert abs(float(rows[0][1]) - math.log(9)) < 0.1

    def test_byte_reproducible(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert dispatch(self._train_args(["--out", str(a)])) == 0
        assert dispatch(self._train_args(["--out", str(b)])) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_save_writes_loadable_checkpoint(self, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        rc = dispatch(self._train_args(["--save", str(ckpt), "--out", str(tmp_path / "m.csv")]))
        assert rc == 0
        snap = load_checkpoint(str(ckpt))
        assert snap["step"] == 6
        assert snap["config"].head_dim == 8
        assert snap["optimizer_state"] is not None

    def test_config_file_with_flag_override(self, tmp_path):
        config_path = tmp_path / "model.json"
        config_path.write_text(json.dumps({
            "vocab": 9, "n_layers": 2, "n_heads": 2, "head_dim": 16, "mlp_dim": 32
        }))
        ckpt = tmp_path / "m.ckpt"
        rc = dispatch(["train", "--task", "copy", "--seg-len", "4", "--symbols", "8",
                       "--config", str(config_path), "--head-dim", "8",
                       "--steps", "2", "--eval-every", "2", "--batch", "2",
                       "--save", str(ckpt), "--out", str(tmp_path / "m.csv")])
        assert rc == 0
        assert load_checkpoint(str(ckpt))["config"].head_dim == 8  # flag beats file

    def test_config_file_without_flags(self, tmp_path):
        config_path = tmp_path / "model.json"
        config_path.write_text(json.dumps({
            "vocab": 9, "n_layers": 2, "n_heads": 2, "head_dim": 16, "mlp_dim": 32
        }))
        ckpt = tmp_path / "m.ckpt"
        dispatch(["train", "--task", "copy", "--seg-len", "4", "--symbols", "8",
                  "--config", str(config_path), "--steps", "2", "--eval-every", "2",
                  "--batch", "2", "--save", str(ckpt), "--out", str(tmp_path / "m.csv")])
        assert load_checkpoint(str(ckpt))["config"].head_dim == 16

    def test_resume_in_f64_is_usage_error(self, tmp_path):
        rc = dispatch(self._train_args(
            ["--precision", "f64", "--resume", str(tmp_path / "x.ckpt")]
        ))
        assert rc == 2

    def test_divergence_exits_one_with_diagnostics(self, tmp_path, capsys):
        rc = dispatch(["train", "--task", "copy", "--seg-len", "4", "--symbols", "8",
                       "--vocab", "9", *SMALL_MODEL, "--steps", "20", "--eval-every", "20",
                       "--batch", "4", "--lr", "1e8", "--warmup", "0",
                       "--out", str(tmp_path / "m.csv")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "non-finite loss" in err
        assert "activations" in err


class TestEvalCommand:
    def _make_checkpoint(self, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        dispatch(["train", "--task", "copy", "--seg-len", "4", "--symbols", "8",
                  "--vocab", "9", *SMALL_MODEL, "--steps", "4", "--eval-every", "4",
                  "--batch", "4", "--save", str(ckpt), "--out", str(tmp_path / "m.csv")])
        return ckpt

    def test_reports_ppl_for_checkpoint(self, tmp_path):
        ckpt = self._make_checkpoint(tmp_path)
        out = tmp_path / "eval.json"
        rc = dispatch(["eval", "--ckpt", str(ckpt), "--task", "copy", "--seg-len", "4",
                       "--symbols", "8", "--batches", "2", "--batch", "4",
                       "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["step"] == 4
        assert 1.0 < report["ppl"] < 20.0

    def test_modes_agree(self, tmp_path):
        ckpt = self._make_checkpoint(tmp_path)
        ppls = {}
        for mode in ("chunked", "recurrent"):
            out = tmp_path / f"{mode}.json"
            dispatch(["eval", "--ckpt", str(ckpt), "--task", "copy", "--seg-len", "4",
                      "--symbols", "8", "--batches", "2", "--batch", "4", "--mode", mode,
                      "--out", str(out)])
            ppls[mode] = json.loads(out.read_text())["ppl"]
        assert abs(ppls["chunked"] / ppls["recurrent"] - 1.0) < 1e-4

    def test_missing_checkpoint_is_usage_error(self, tmp_path):
        rc = dispatch(["eval", "--ckpt", str(tmp_path / "absent.ckpt"), "--task", "copy"])
        assert rc == 2


class TestAblateCommand:
    def test_single_axis_rows(self, tmp_path):
        out = tmp_path / "ablate.csv"
        rc = dispatch(["ablate", "--axis", "feature_dim", "--grid", "4,8", "--seeds", "1",
                       "--task", "copy", "--seg-len", "4", "--symbols", "8", "--vocab", "9",
                       *SMALL_MODEL, "--steps", "2", "--eval-every", "2", "--batch", "2",
                       "--out", str(out)])
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["axis", "value", "seed", "final_loss", "final_accuracy", "pre_norm_std"]
        assert [(r[0], r[1], r[2]) for r in rows] == [
            ("feature_dim", "4", "0"), ("feature_dim", "8", "0")
        ]
        assert all(float(r[3]) > 0 for r in rows)

    def test_scaling_axis_reports_pre_norm_std(self, tmp_path):
        out = tmp_path / "scaling.csv"
        rc = dispatch(["ablate", "--axis", "scaling", "--grid",
                       "inv_sqrt_d,variance_reduction", "--seeds", "1",
                       "--task", "copy", "--seg-len", "4", "--symbols", "8", "--vocab", "9",
                       *SMALL_MODEL, "--steps", "2", "--eval-every", "2", "--batch", "2",
                       "--out", str(out)])
        assert rc == 0
        _, rows = _read_csv(out)
        stds = {r[1]: float(r[5]) for r in rows}
        assert abs(stds["variance_reduction"] - 1.0) < abs(stds["inv_sqrt_d"] - 1.0)

    def test_rejects_f64(self):
        assert dispatch(["ablate", "--axis", "feature_dim", "--grid", "4",
                         "--precision", "f64"]) == 2

    def test_empty_grid_is_usage_error(self, tmp_path):
        rc = dispatch(["ablate", "--axis", "feature_dim", "--grid", ",", "--seeds", "1",
                       "--task", "copy", "--seg-len", "4", "--symbols", "8",
                       "--steps", "1", "--eval-every", "1", "--batch", "2",
                       "--out", str(tmp_path / "x.csv")])
        assert rc == 2

    def test_unknown_axis_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            dispatch(["ablate", "--axis", "optimizer", "--grid", "adam"])
        assert info.value.code == 2


class TestBenchCommand:
    def test_rows_and_reproducibility_excluding_timing(self, tmp_path):
        """Reruns agree byte-for-byte on every column except *_ms."""
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["bench", "--kinds", "softmax,regla", "--gen-lens", "4,8",
                "--trials", "1", "--prompt-len", "2", "--vocab", "32", *SMALL_MODEL]
        assert dispatch(argv + ["--out", str(a)]) == 0
        assert dispatch(argv + ["--out", str(b)]) == 0
        header, rows_a = _read_csv(a)
        _, rows_b = _read_csv(b)
        assert header == ["kind", "gen_len", "analytic_state_bytes",
                          "measured_peak_bytes", "median_ms"]
        assert len(rows_a) == 4
        ms_index = header.index("median_ms")
        for ra, rb in zip(rows_a, rows_b):
            assert ra[:ms_index] == rb[:ms_index]
            assert float(ra[ms_index]) > 0

    def test_rejects_f64(self):
        assert dispatch(["bench", "--precision", "f64"]) == 2

    def test_unknown_kind_is_usage_error(self):
        assert dispatch(["bench", "--kinds", "mamba", "--gen-lens", "4"]) == 2


class TestConsoleScript:
    def test_installed_entry_point_runs(self, tmp_path):
        out = tmp_path / "v.csv"
        proc = subprocess.run(
            ["regla", "variance", "--d", "2", "--n", "100", "--out", str(out)],
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        assert out.read_text().startswith("d,feature,")
