"""Experiment driver and command-line front end.

Structural checks run the real experiments with miniature replicate
counts; the statistical thresholds themselves are exercised at full size
in test_acceptance.py.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ubmcmc.cli import main
from ubmcmc.errors import ConfigError
from ubmcmc.experiments import (
    EXPERIMENT_NAMES,
    SCHEMA_VERSION,
    ExperimentConfig,
    ExperimentResult,
    build_model,
    cost_bound_units,
    fit_rate,
    generate_data_document,
    load_config,
    meeting_time_report,
    per_application_units,
    resolve_config,
    run_experiment,
    trend_confidence,
)
from ubmcmc.kernels import HmcSettings, KernelSettings
from ubmcmc.models import make_data
from ubmcmc.rng import replicate_streams

from helpers import GaussTarget


# ---------------------------------------------------------------------------
# rate fits and trend lines
# ---------------------------------------------------------------------------


class TestFitRate:
    def test_exact_geometric_decay(self):
        points = [(l, 2.0 ** (-4 * l)) for l in range(1, 7)]
        fit = fit_rate(points)
        assert_allclose(fit.slope, -4.0, atol=1e-12)
        assert_allclose(fit.intercept, 0.0, atol=1e-10)
        assert_allclose(fit.r_squared, 1.0, atol=1e-12)

    def test_noisy_points_give_partial_r_squared(self):
        fit = fit_rate([(1, 0.5), (2, 0.3), (3, 0.1)])
        assert fit.slope < 0
        assert 0.9 < fit.r_squared < 1.0

    def test_needs_three_points(self):
        with pytest.raises(ConfigError):
            fit_rate([(1, 0.5), (2, 0.25)])

    @pytest.mark.parametrize("bad", [0.0, -1e-3])
    def test_rejects_nonpositive_values(self, bad):
        with pytest.raises(ConfigError):
            fit_rate([(1, 0.5), (2, bad), (3, 0.1)])


class TestTrendConfidence:
    def test_exact_line_collapses_interval(self):
        xs = [0.0, 1.0, 2.0, 3.0]
        ys = [2.0 - 0.5 * x for x in xs]
        slope, lo, hi = trend_confidence(xs, ys)
        assert_allclose(slope, -0.5, atol=1e-12)
        assert_allclose(lo, slope, atol=1e-10)
        assert_allclose(hi, slope, atol=1e-10)

    def test_flat_noise_interval_contains_zero(self):
        xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        ys = [0.0, 0.1, -0.1, 0.1, -0.1, 0.0]
        slope, lo, hi = trend_confidence(xs, ys)
        assert lo < 0.0 < hi

    def test_needs_three_points(self):
        with pytest.raises(ConfigError):
            trend_confidence([0.0, 1.0], [0.0, 1.0])


class TestMeetingTimeReport:
    def test_single_level_stats_and_geometric_tail(self):
        # survival halves at each step: P(tau > n) = 2^-n for n = 1..4
        taus = [1] * 8 + [2] * 4 + [3] * 2 + [4] + [5]
        report = meeting_time_report({0: taus})
        stats = report["levels"]["0"]
        arr = np.array(taus, dtype=float)
        assert_allclose(stats["mean"], arr.mean())
        assert_allclose(stats["q50"], np.quantile(arr, 0.5))
        assert_allclose(stats["q90"], np.quantile(arr, 0.9))
        assert_allclose(stats["q99"], np.quantile(arr, 0.99))
        assert stats["max"] == 5
        tail = report["tail"]
        assert tail["points"] == 4
        assert_allclose(tail["log2_rate"], -1.0, atol=1e-12)
        assert_allclose(tail["r_squared"], 1.0, atol=1e-12)
        assert report["mean_trend"] is None

    def test_three_levels_fit_a_mean_trend(self):
        taus = {0: [2, 3, 4], 1: [2, 3, 4], 2: [2, 3, 4]}
        report = meeting_time_report(taus)
        trend = report["mean_trend"]
        assert_allclose(trend["slope"], 0.0, atol=1e-12)
        assert trend["ci_lo"] <= 0.0 <= trend["ci_hi"]
        assert set(report["levels"]) == {"0", "1", "2"}


# ---------------------------------------------------------------------------
# cost accounting helpers
# ---------------------------------------------------------------------------


class TestCostAccounting:
    def test_per_application_units(self):
        target = GaussTarget(dim=2)
        rw = KernelSettings(kind="rwmh", sigma=1.0, coupling="reflection-max")
        assert per_application_units(rw, target, 3) == 8.0
        hmc = KernelSettings(
            kind="hmc-mix",
            hmc=HmcSettings(epsilon=0.1, n_steps=4, kappa=0.9, fallback_sigma=1e-3),
        )
        assert per_application_units(hmc, target, 3) == 6 * 8.0

    def test_cost_bound_tracks_the_larger_branch(self):
        target = GaussTarget(dim=2)
        rw = KernelSettings(kind="rwmh", sigma=1.0, coupling="reflection-max")
        # m + tau - 1 dominates
        assert cost_bound_units(rw, target, 2, m=10, tau_check=3) == 2 * 12 * 4.0
        # 2 tau - 1 dominates
        assert cost_bound_units(rw, target, 2, m=10, tau_check=20) == 2 * 39 * 4.0


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------


class TestResolveConfig:
    def test_defaults_fill_in(self):
        cfg = resolve_config({"model": "toy", "experiment": "estimate"})
        assert cfg.seed == 0
        assert cfg.workers == 1
        assert cfg.params["k"] == 100
        assert cfg.params["m"] == 1000
        assert cfg.params["replicates"] == 10_000
        assert cfg.params["eta"] == 2.5
        assert cfg.data["seed"] == 2024
        assert cfg.data["theta"] == 1.0

    def test_param_overrides_merge(self):
        cfg = resolve_config(
            {"model": "toy", "experiment": "estimate", "params": {"replicates": 7}}
        )
        assert cfg.params["replicates"] == 7
        assert cfg.params["k"] == 100  # untouched default

    def test_embedded_data_defaults(self):
        # the sgd defaults carry their own data block (theta far from the
        # optimum) which must land in data, not params
        cfg = resolve_config({"model": "toy", "experiment": "sgd"})
        assert "data" not in cfg.params
        assert cfg.data["theta"] == 100.0
        assert cfg.data["seed"] == 2024

    def test_user_data_beats_embedded_data(self):
        cfg = resolve_config(
            {"model": "toy", "experiment": "sgd", "data": {"theta": 3.5}}
        )
        assert cfg.data["theta"] == 3.5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            resolve_config({"model": "toy", "experiment": "estimate", "extra": 1})

    def test_schema_version_checked(self):
        with pytest.raises(ConfigError, match="schema_version"):
            resolve_config(
                {"model": "toy", "experiment": "estimate", "schema_version": 99}
            )

    def test_model_and_experiment_required(self):
        with pytest.raises(ConfigError):
            resolve_config({"model": "toy"})
        with pytest.raises(ConfigError):
            resolve_config({"experiment": "estimate"})

    def test_unavailable_combination(self):
        with pytest.raises(ConfigError):
            resolve_config({"model": "elliptic", "experiment": "sgd"})

    def test_load_config_round_trip(self, tmp_path):
        doc = {"model": "toy", "experiment": "estimate", "seed": 13}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        assert load_config(path) == resolve_config(doc)

    def test_manifest_is_json_ready(self):
        cfg = resolve_config({"model": "toy", "experiment": "estimate", "seed": 4})
        manifest = cfg.manifest()
        assert manifest["schema_version"] == SCHEMA_VERSION
        assert manifest["seed"] == 4
        json.dumps(manifest)  # no numpy leakage

    def test_direct_construction_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(model="nope", experiment="estimate", seed=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(model="toy", experiment="nope", seed=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(model="elliptic", experiment="mse-vs-n", seed=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(model="toy", experiment="estimate", seed=0, workers=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(model="toy", experiment="estimate", seed="0")

    def test_every_default_combination_resolves(self):
        for experiment in EXPERIMENT_NAMES:
            for model in ("toy", "elliptic", "sirx"):
                try:
                    cfg = resolve_config({"model": model, "experiment": experiment})
                except ConfigError:
                    continue
                assert cfg.experiment == experiment


# ---------------------------------------------------------------------------
# model/data construction
# ---------------------------------------------------------------------------


class TestDataDocuments:
    def test_toy_document_round_trips_through_a_file(self, tmp_path):
        doc = generate_data_document("toy", None, seed=11)
        assert doc["model"] == "toy"
        assert doc["seed"] == 11
        y = make_data(
            "toy", replicate_streams(11, 0).init, theta=1.0, x_true=(2.0, -2.0)
        )
        assert_array_equal(np.array(doc["y"]), y)

        path = tmp_path / "toy.json"
        path.write_text(json.dumps(doc))
        model = build_model("toy", {"file": str(path), "theta": 1.0})
        assert_array_equal(model.y, y)

    def test_level_lands_in_params_for_solver_models(self):
        doc = generate_data_document("sirx", 3, seed=2)
        assert doc["params"]["level"] == 3
        y = make_data(
            "sirx",
            replicate_streams(2, 0).init,
            theta=(1.0, 1.0),
            x_true=(0.002, 0.3, 15.0),
            level=3,
        )
        assert_array_equal(np.array(doc["y"]), y)

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigError):
            generate_data_document("nope", None, seed=0)

    def test_build_model_matches_defaults(self):
        cfg = resolve_config({"model": "toy", "experiment": "estimate"})
        model = build_model("toy", cfg.data)
        y = make_data(
            "toy", replicate_streams(2024, 0).init, theta=1.0, x_true=(2.0, -2.0)
        )
        assert_array_equal(model.y, y)
        assert model.theta == 1.0


# ---------------------------------------------------------------------------
# experiment runs (miniature replicate counts)
# ---------------------------------------------------------------------------


def _tiny_increment_config(workers: int = 1, output: "str | None" = None):
    return resolve_config(
        {
            "model": "toy",
            "experiment": "increment-rate",
            "seed": 21,
            "workers": workers,
            "output": output,
            "params": {"levels": [1, 3], "replicates": 4, "k": 3, "m": 12},
        }
    )


class TestForwardRateExperiment:
    def test_toy_run_passes_and_reports_the_fit(self):
        cfg = resolve_config({"model": "toy", "experiment": "forward-rate", "seed": 1})
        result = run_experiment(cfg)
        assert result.all_passed
        fit = result.summary["rate_fit"]
        assert -5.0 <= fit["slope"] <= -3.0
        lines = result.csv_text.splitlines()
        assert lines[0] == "level,sq_diff"
        assert len(lines) == 1 + 7  # levels 1..7

    def test_outputs_are_reproduced_byte_for_byte(self, tmp_path):
        files = ("replicates.csv", "summary.json", "manifest.json")
        texts = {}
        for sub in ("a", "b"):
            out = tmp_path / sub
            cfg = resolve_config(
                {
                    "model": "toy",
                    "experiment": "forward-rate",
                    "seed": 1,
                    "output": str(out),
                }
            )
            run_experiment(cfg)
            texts[sub] = {f: (out / f).read_bytes() for f in files}
        for f in files:
            assert texts["a"][f] == texts["b"][f]

    def test_summary_and_manifest_parse(self, tmp_path):
        out = tmp_path / "run"
        cfg = resolve_config(
            {
                "model": "toy",
                "experiment": "forward-rate",
                "seed": 1,
                "output": str(out),
            }
        )
        result = run_experiment(cfg)
        summary = json.loads((out / "summary.json").read_text())
        assert summary == result.summary
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest == cfg.manifest()
        assert (out / "replicates.csv").read_text() == result.csv_text


class TestIncrementRateExperiment:
    def test_structure_and_cost_bound(self):
        result = run_experiment(_tiny_increment_config())
        lines = result.csv_text.splitlines()
        assert lines[0] == (
            "level,rep,xi_0,xi_1,tau,tau_lm1,stop,cost_units,cost_bound_units"
        )
        assert len(lines) == 1 + 3 * 4
        by_name = {c["name"]: c for c in result.checks}
        assert by_name["cost-bound"]["passed"]
        assert "tau-no-growth" in by_name  # three levels -> trend fitted
        assert set(result.summary["mean_sq_by_level"]) == {"1", "2", "3"}

    def test_worker_count_does_not_change_results(self, tmp_path):
        serial = run_experiment(_tiny_increment_config(workers=1))
        forked = run_experiment(_tiny_increment_config(workers=2))
        assert forked.csv_text == serial.csv_text
        assert forked.summary == serial.summary


class TestEstimateExperiment:
    def test_structure_and_meeting_report(self):
        cfg = resolve_config(
            {
                "model": "toy",
                "experiment": "estimate",
                "seed": 33,
                "params": {
                    "replicates": 50,
                    "k": 5,
                    "m": 20,
                    "flavor": "independent-sum",
                    "z_max": None,
                },
            }
        )
        result = run_experiment(cfg)
        lines = result.csv_text.splitlines()
        assert lines[0] == (
            "rep,value_0,value_1,level,cost_units,cost_bound_units,tau_check_max"
        )
        assert len(lines) == 1 + 50
        assert result.summary["flavor"] == "independent-sum"
        assert len(result.summary["mean"]) == 2
        assert len(result.summary["se"]) == 2
        assert result.summary["total_cost_units"] > 0
        assert "0" in result.summary["meeting_times"]["levels"]
        by_name = {c["name"]: c for c in result.checks}
        assert by_name["cost-bound"]["passed"]
        # z scores are reported against the analytic mean even when no
        # threshold is configured
        assert result.summary["z_scores"] is not None


class TestMseExperiment:
    def test_group_sizes_and_pool(self):
        cfg = resolve_config(
            {
                "model": "toy",
                "experiment": "mse-vs-n",
                "seed": 5,
                "params": {
                    "n_grid": [4, 8, 16],
                    "reps_max": 6,
                    "reps_min": 2,
                    "k": 3,
                    "m": 10,
                },
            }
        )
        result = run_experiment(cfg)
        assert result.summary["replicates_by_n"] == {"4": 6, "8": 3, "16": 2}
        assert result.summary["pool_size"] == 32
        lines = result.csv_text.splitlines()
        assert lines[0] == "n,group,mean_0,mean_1,sq_error"
        assert len(lines) == 1 + 6 + 3 + 2
        assert set(result.summary["mse_by_n"]) == {"4", "8", "16"}


class TestSgdExperiment:
    def test_trace_rows_and_cost_accumulation(self):
        cfg = resolve_config(
            {
                "model": "toy",
                "experiment": "sgd",
                "seed": 8,
                "params": {
                    "replicates": 2,
                    "iterations": 4,
                    "k": 2,
                    "m": 6,
                    "theta0": [5.0],
                    "alpha1": 0.05,
                },
            }
        )
        result = run_experiment(cfg)
        reader = csv.reader(io.StringIO(result.csv_text))
        header = next(reader)
        assert header == [
            "rep", "iteration", "theta_0", "grad_0", "cost_units", "cumulative_cost",
        ]
        rows = list(reader)
        assert len(rows) == 2 * 5  # iterations 0..4 per replicate
        for rep in ("0", "1"):
            rep_rows = [r for r in rows if r[0] == rep]
            assert rep_rows[0][1] == "0"
            assert rep_rows[0][3] == ""  # no gradient before the first step
            cums = [float(r[5]) for r in rep_rows]
            assert cums[0] == 0.0
            assert all(b > a for a, b in zip(cums[1:], cums[2:]))
        assert result.summary["theta_mle"] > 0
        assert len(result.summary["final_thetas"]) == 2


class TestCouplingTestsExperiment:
    def test_miniature_battery_passes(self):
        cfg = resolve_config(
            {
                "model": "toy",
                "experiment": "coupling-tests",
                "seed": 7,
                "params": {
                    "draws": 3000,
                    "pair_runs": 25,
                    "quad_runs": 4,
                    "k": 5,
                    "m": 40,
                    "freq_tol": 0.05,
                },
            }
        )
        result = run_experiment(cfg)
        assert result.all_passed, [c for c in result.checks if not c["passed"]]
        cases = result.summary["cases"]
        assert cases["faithfulness"]["violations"] == 0
        assert cases["faithfulness"]["runs"] == 29
        assert abs(cases["max-pair"]["meet_frequency"]
                   - cases["max-pair"]["overlap_mass"]) <= 0.05
        names = {row.split(",")[0] for row in result.csv_text.splitlines()[1:]}
        assert {"max-pair", "faithfulness", "quad-xf"} <= names


class TestResultFlag:
    def test_all_passed_requires_every_check(self):
        cfg = resolve_config({"model": "toy", "experiment": "forward-rate"})
        good = ExperimentResult(
            config=cfg,
            summary={},
            checks=[{"name": "a", "passed": True, "detail": ""}],
            csv_text="",
        )
        assert good.all_passed
        mixed = ExperimentResult(
            config=cfg,
            summary={},
            checks=[
                {"name": "a", "passed": True, "detail": ""},
                {"name": "b", "passed": False, "detail": ""},
            ],
            csv_text="",
        )
        assert not mixed.all_passed


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _write_config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


class TestCli:
    def test_run_writes_outputs_and_prints_checks(self, tmp_path, capsys):
        out = tmp_path / "out"
        path = _write_config(
            tmp_path,
            {
                "model": "toy",
                "experiment": "forward-rate",
                "seed": 3,
                "output": str(out),
            },
        )
        rc = main(["run", "--config", str(path)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "PASS forward-rate-slope" in stdout
        assert "wrote replicates.csv" in stdout
        for name in ("replicates.csv", "summary.json", "manifest.json"):
            assert (out / name).exists()

    def test_check_flag_gates_the_exit_code(self, tmp_path, capsys):
        # an impossible slope target makes the threshold check fail while
        # the run itself still completes
        path = _write_config(
            tmp_path,
            {
                "model": "toy",
                "experiment": "forward-rate",
                "seed": 3,
                "params": {"target_slope": 100.0},
            },
        )
        assert main(["run", "--config", str(path)]) == 0
        assert main(["run", "--config", str(path), "--check"]) == 1
        assert "FAIL forward-rate-slope" in capsys.readouterr().out

    def test_seed_and_worker_overrides_reach_the_manifest(self, tmp_path):
        out = tmp_path / "out"
        path = _write_config(
            tmp_path,
            {
                "model": "toy",
                "experiment": "forward-rate",
                "seed": 3,
                "output": str(out),
            },
        )
        rc = main(["run", "--config", str(path), "--seed", "5", "--workers", "1"])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 5
        assert manifest["workers"] == 1

    def test_config_errors_exit_2(self, tmp_path, capsys):
        path = _write_config(tmp_path, {"model": "toy"})
        rc = main(["run", "--config", str(path)])
        assert rc == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_generate_data_default_name(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        rc = main(["generate-data", "--model", "toy", "--seed", "11"])
        assert rc == 0
        assert "toy-data.json" in capsys.readouterr().out
        doc = json.loads((tmp_path / "toy-data.json").read_text())
        assert doc == generate_data_document("toy", None, seed=11)

    def test_generate_data_custom_out_feeds_a_run(self, tmp_path):
        data_path = tmp_path / "obs.json"
        rc = main(
            ["generate-data", "--model", "toy", "--seed", "11",
             "--out", str(data_path)]
        )
        assert rc == 0
        cfg_path = _write_config(
            tmp_path,
            {
                "model": "toy",
                "experiment": "forward-rate",
                "data": {"file": str(data_path), "theta": 1.0},
            },
        )
        assert main(["run", "--config", str(cfg_path), "--check"]) == 0
