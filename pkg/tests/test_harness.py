import hashlib
import os
import shutil

import numpy as np
import pytest

from plumeflow.errors import ArgumentError, CorrelationError, DomainError, FormatError
from plumeflow.grid import divergence
from plumeflow.harness.cli import main as cli_main
from plumeflow.harness.io import read_csv, write_csv
from plumeflow.harness.pipeline import (
    ExperimentConfig,
    load_config,
    run_pipeline,
    sweep_check_interval,
)
from plumeflow.harness.scenarios import (
    Obstacle,
    Scenario,
    ScenarioSpec,
    build_geometry,
    generate_scenario,
    initial_state,
    turbulent_velocity,
)
from plumeflow.harness.stats import analyze_correlation, association_band, pearson, spearman

from oracles import pearson_direct, spearman_direct

SMOKE_KW = dict(
    eval_grid=16, train_grid=16, knn_grid=16,
    n_train=3, n_eval=4, n_knn=4, n_steps=8,
    iter_counts=(1, 2), candidate_kind="iterative",
)


@pytest.fixture(scope="module")
def smoke_artifacts(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline") / "run"
    cfg = ExperimentConfig(out_dir=str(out), **SMOKE_KW)
    run_pipeline(cfg)
    return cfg


class TestScenarios:
    def test_zero_modes_zero_velocity(self):
        spec = ScenarioSpec(nx=16, ny=16, mode_count=0)
        sc = generate_scenario(spec, 1)
        geo = build_geometry(sc)
        vel = turbulent_velocity(sc, geo)
        assert (vel.u == 0).all() and (vel.v == 0).all()

    def test_initial_velocity_divergence_free(self):
        spec = ScenarioSpec(nx=24, ny=24, mode_count=8, max_obstacles=3)
        for seed in range(6):
            sc = generate_scenario(spec, seed)
            state, region = initial_state(sc, dt=0.1)
            div = divergence(state.vel, state.geo)
            interior = state.geo.fluid.copy()
            assert np.abs(div.values[interior]).max() <= 1e-10

    def test_deterministic_per_seed(self):
        spec = ScenarioSpec(nx=16, ny=16)
        a = generate_scenario(spec, 42)
        b = generate_scenario(spec, 42)
        assert a.obstacles == b.obstacles
        assert a.modes == b.modes
        c = generate_scenario(spec, 43)
        assert a.modes != c.modes

    def test_obstacle_outside_domain_rejected(self):
        spec = ScenarioSpec(nx=16, ny=16)
        sc = generate_scenario(spec, 3)
        sc.obstacles.append(Obstacle("circle", (15.5, 8.0), (3.0, 3.0)))
        with pytest.raises(DomainError):
            build_geometry(sc)

    def test_source_region_is_fluid(self):
        spec = ScenarioSpec(nx=24, ny=24)
        for seed in range(4):
            sc = generate_scenario(spec, seed)
            state, region = initial_state(sc, dt=0.1)
            assert region.any()
            assert not (region & state.geo.solid).any()


class TestStats:
    def test_pearson_perfect(self):
        x = [1.0, 2.0, 3.0, 4.0]
        assert pearson(x, x) == pytest.approx(1.0)
        assert pearson(x, [-v for v in x]) == pytest.approx(-1.0)

    def test_pearson_golden_case(self):
        x = [1.0, 2.0, 3.0]
        y = [1.0, 2.0, 4.0]
        assert pearson(x, y) == pytest.approx(pearson_direct(x, y), abs=1e-12)
        assert -1.0 <= pearson(x, y) <= 1.0

    def test_pearson_matches_oracle_random(self, rng):
        for n in (10, 100, 1000, 10_000):
            x = rng.standard_normal(n)
            y = 0.5 * x + rng.standard_normal(n)
            assert pearson(x, y) == pytest.approx(pearson_direct(x, y), abs=1e-12)

    def test_pearson_zero_variance(self):
        with pytest.raises(CorrelationError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_spearman_perfect_and_reversed(self):
        x = [1.0, 2.0, 3.0, 4.0]
        assert spearman(x, x) == pytest.approx(1.0)
        assert spearman(x, x[::-1]) == pytest.approx(-1.0)

    def test_spearman_golden_case(self):
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_spearman_matches_oracle(self, rng):
        for n in (8, 64, 512, 10_000):
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            assert spearman(x, y) == pytest.approx(spearman_direct(x, y), abs=1e-12)

    def test_spearman_constant_rejected(self):
        with pytest.raises(CorrelationError):
            spearman([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_bands(self):
        assert association_band(0.05) == "negligible"
        assert association_band(0.2) == "weak"
        assert association_band(0.4) == "medium"
        assert association_band(0.61) == "strong"

    def test_analyze_linear_relationship(self):
        pts = [(float(i), 0.001 * i) for i in range(1, 40)]
        rp, rs, bp, bs = analyze_correlation(pts)
        assert rp == pytest.approx(1.0)
        assert rs == pytest.approx(1.0)
        assert bp == bs == "strong"


class TestCsv:
    def test_roundtrip_lossless(self, tmp_path, rng):
        path = tmp_path / "t.csv"
        rows = [["a", 1, float(rng.standard_normal()), True],
                ["b", -2, 1e-300, False]]
        write_csv(path, ["name", "count", "value", "flag"], rows)
        header, back = read_csv(path)
        assert header == ["name", "count", "value", "flag"]
        assert back == rows

    def test_rewrite_byte_identical(self, tmp_path, rng):
        path1 = tmp_path / "a.csv"
        path2 = tmp_path / "b.csv"
        rows = [[float(v)] for v in rng.standard_normal(50)]
        write_csv(path1, ["v"], rows)
        header, back = read_csv(path1)
        write_csv(path2, header, back)
        assert path1.read_bytes() == path2.read_bytes()

    def test_width_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            write_csv(tmp_path / "t.csv", ["a", "b"], [[1]])


class TestPipeline:
    def test_artifacts_present_and_schema_valid(self, smoke_artifacts):
        cfg = smoke_artifacts
        expected = [
            "scenarios_train.csv", "scenarios_eval.csv", "scenarios_knn.csv",
            "candidates.csv", "records.csv", "pareto.csv", "samples.csv",
            "mlp_loss.csv", "mlp_model.json", "requirement.csv", "selected.csv",
            "knn_db.csv", "eval_records.csv", "corr_points.csv",
            "adaptive_intervals.csv", "model_usage.csv", "correlation.csv",
            "comparison.csv", "boxplot.csv", "time_distribution.csv",
            "MANIFEST.json",
        ]
        for name in expected:
            assert os.path.exists(cfg.path(name)), name
        for name in expected:
            if name.endswith(".csv"):
                header, rows = read_csv(cfg.path(name))
                assert header

    def test_every_csv_roundtrips(self, smoke_artifacts, tmp_path):
        cfg = smoke_artifacts
        for name in os.listdir(cfg.out_dir):
            if not name.endswith(".csv"):
                continue
            header, rows = read_csv(cfg.path(name))
            copy = tmp_path / name
            write_csv(copy, header, rows)
            assert copy.read_bytes() == open(cfg.path(name), "rb").read(), name

    def test_records_count(self, smoke_artifacts):
        cfg = smoke_artifacts
        header, rows = read_csv(cfg.path("records.csv"))
        # 2 iterative candidates + the exact solver, each over n_train problems
        assert len(rows) == 3 * cfg.n_train

    def test_seed_ranges_disjoint_enforced(self):
        with pytest.raises(ArgumentError):
            ExperimentConfig(train_seed_base=0, eval_seed_base=2, n_train=10, n_eval=4)

    def test_config_file_loading(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"out_dir": "x", "n_train": 5, "iter_counts": [1, 2]}')
        cfg = load_config(path)
        assert cfg.n_train == 5
        assert cfg.iter_counts == (1, 2)

    def test_sweep_interval_rows(self, smoke_artifacts):
        cfg = smoke_artifacts
        rows = sweep_check_interval(cfg, [5])
        assert len(rows) == 1
        assert rows[0][0] == 5
        header, back = read_csv(cfg.path("sweep_interval.csv"))
        assert header == ["check_interval", "success_rate", "mean_time_s"]

    def test_sweep_rejects_tiny_interval(self, smoke_artifacts):
        with pytest.raises(ArgumentError):
            sweep_check_interval(smoke_artifacts, [2])


class TestCli:
    def test_stage_sequence_and_exit_codes(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        out = tmp_path / "out"
        cfg_path.write_text(
            '{"out_dir": "%s", "eval_grid": 16, "train_grid": 16, "knn_grid": 16,'
            ' "n_train": 3, "n_eval": 3, "n_knn": 3, "n_steps": 8,'
            ' "iter_counts": [1, 2], "candidate_kind": "iterative"}' % out
        )
        for command in ("generate", "profile", "train-mlp", "select",
                        "build-knn", "run-adaptive", "analyze-corr", "compare"):
            assert cli_main(["--config", str(cfg_path), command]) == 0, command
        assert (out / "comparison.csv").exists()

    def test_missing_config_exit_code(self, capsys):
        assert cli_main(["--config", "/nonexistent.json", "generate"]) == 2
        assert "config" in capsys.readouterr().err

    def test_stage_failure_tagged(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        out = tmp_path / "out"
        cfg_path.write_text('{"out_dir": "%s"}' % out)
        # run-adaptive without its inputs fails with a tagged message
        code = cli_main(["--config", str(cfg_path), "run-adaptive"])
        assert code == 1
        assert "run-eval" in capsys.readouterr().err

    def test_out_dir_override(self, tmp_path):
        out = tmp_path / "over"
        assert cli_main(["--out-dir", str(out), "generate"]) == 0
        assert (out / "scenarios_train.csv").exists()


class TestNumpyScalarCells:
    def test_numpy_scalars_serialize_as_plain_decimals(self, tmp_path):
        import numpy as np

        path = tmp_path / "np.csv"
        write_csv(path, ["a", "b", "c"],
                  [[np.float64(0.25), np.int64(7), np.bool_(True)]])
        text = path.read_text()
        assert "np.float64" not in text and "np.int64" not in text
        header, rows = read_csv(path)
        assert rows == [[0.25, 7, True]]
