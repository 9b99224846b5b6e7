import numpy as np
import pytest

from plumeflow.errors import ArgumentError, FitError
from plumeflow.fluid import SimConfig, SimState
from plumeflow.forge import SolverCandidate
from plumeflow.grid import ScalarField
from plumeflow.mlp import RankedCandidate, UserRequirement
from plumeflow.runtime import (
    CONTINUE,
    RESTART,
    SWITCH_ACCURATE,
    SWITCH_FASTER,
    KnnDatabase,
    RegressionModel,
    RuntimeConfig,
    accumulate,
    build_knn_database,
    decide,
    fit_regression,
    interval_rows,
    knn_predict_qloss,
    predict_cum_final,
    run_adaptive,
)
from plumeflow.solvers import PcgPressureSolver
from plumeflow.fluid import simulate

from conftest import random_geometry
from oracles import knn_mean_scan, least_squares_line


def ranked(cid, mean_time, mean_qloss, r_hat, iters=2):
    cand = SolverCandidate(id=cid, source="iterative", iters=iters,
                           mean_time=mean_time, mean_qloss=mean_qloss)
    return RankedCandidate(cand, r_hat)


def worked_five():
    """Five-model fixture shaped like the worked runtime example."""
    return [
        ranked("M1", 1.0, 0.020, 0.91, iters=1),
        ranked("M2", 0.8, 0.025, 0.86, iters=1),
        ranked("M3", 1.5, 0.015, 0.82, iters=2),
        ranked("M4", 1.2, 0.018, 0.79, iters=2),
        ranked("M5", 2.0, 0.010, 0.74, iters=4),
    ]


class TestAccumulate:
    def test_empty(self):
        assert accumulate([], 0.0) == [0.0]

    def test_prefix_sums(self):
        h = []
        for v in [1.0, 2.0, 3.0]:
            h = accumulate(h, v)
        assert h == [1.0, 3.0, 6.0]

    def test_matches_sum_oracle(self, rng):
        values = rng.random(128)
        h = []
        for v in values:
            h = accumulate(h, float(v))
        assert h[-1] == pytest.approx(float(values.sum()), abs=1e-12)
        assert all(a <= b + 1e-15 for a, b in zip(h, h[1:]))

    def test_negative_rejected(self):
        with pytest.raises(ArgumentError):
            accumulate([1.0], -0.5)


class TestRegression:
    def test_exact_line(self):
        pts = [(x, 2.0 * x + 1.0) for x in range(1, 6)]
        m = fit_regression(pts)
        assert m.a == pytest.approx(2.0, abs=1e-12)
        assert m.b == pytest.approx(1.0, abs=1e-12)

    def test_horizontal(self):
        m = fit_regression([(1, 7.0), (2, 7.0), (3, 7.0)])
        assert m.a == pytest.approx(0.0, abs=1e-12)
        assert m.b == pytest.approx(7.0, abs=1e-12)

    def test_matches_normal_equations_oracle(self, rng):
        pts = [(float(x), float(2.5 * x + rng.normal())) for x in (3.0, 5.0, 9.0)]
        m = fit_regression(pts)
        a, b = least_squares_line(pts)
        assert m.a == pytest.approx(a, abs=1e-10)
        assert m.b == pytest.approx(b, abs=1e-10)

    def test_underdetermined_rejected(self):
        with pytest.raises(FitError):
            fit_regression([(1, 2.0)])
        with pytest.raises(FitError):
            fit_regression([(1, 2.0), (1, 3.0)])

    def test_predict_constant_with_clamp(self):
        m = RegressionModel(a=0.0, b=10.0, last_observed=12.0)
        assert predict_cum_final(m, 1000) == 12.0
        m = RegressionModel(a=0.0, b=10.0, last_observed=4.0)
        assert predict_cum_final(m, 1000) == 10.0

    def test_linear_extrapolation_endpoint(self):
        # slope 3, intercept 11 reaches 395 at step 128
        m = RegressionModel(a=3.0, b=11.0, last_observed=0.0)
        assert predict_cum_final(m, 128) == pytest.approx(395.0, abs=1e-12)

    def test_exact_history_extrapolates_exactly(self):
        history = [4.0 * i + 2.0 for i in range(1, 11)]
        pts = list(enumerate(history, start=1))[-3:]
        m = fit_regression(pts)
        assert predict_cum_final(m, 128) == pytest.approx(4.0 * 128 + 2.0, abs=1e-9)


class TestKnn:
    def test_golden_worked_example(self):
        db = KnnDatabase([(101, 0.09), (112, 0.11), (105, 0.10), (109, 0.11)], k=4)
        assert knn_predict_qloss(db, 108.0) == pytest.approx(0.1025, abs=1e-12)

    def test_in_order_sorted(self, rng):
        keys = rng.random(33) * 100
        db = KnnDatabase([(k, 0.1) for k in keys], k=4)
        ordered = [k for k, _ in db.in_order()]
        assert ordered == sorted(keys.tolist())

    def test_exact_key_lookup_k1(self):
        db = KnnDatabase([(101, 0.09), (112, 0.11), (105, 0.10)], k=1)
        assert knn_predict_qloss(db, 105.0) == pytest.approx(0.10)

    def test_single_pair(self):
        db = KnnDatabase([(50.0, 0.3)], k=1)
        assert knn_predict_qloss(db, 999.0) == pytest.approx(0.3)

    def test_small_db_flagged_degenerate_mean(self):
        db = KnnDatabase([(1.0, 0.2), (2.0, 0.4)], k=4)
        with pytest.warns(UserWarning):
            out = knn_predict_qloss(db, 1.5)
        assert out == pytest.approx(0.3)

    def test_matches_linear_scan_oracle(self, rng):
        for size in (5, 50, 500, 10_000):
            pairs = [(float(k), float(v)) for k, v in
                     zip(rng.random(size) * 1000, rng.random(size))]
            db = KnnDatabase(pairs, k=4)
            for _ in range(25):
                q = float(rng.random() * 1200 - 100)
                assert knn_predict_qloss(db, q) == pytest.approx(
                    knn_mean_scan(pairs, q, 4), abs=1e-12
                )

    def test_tie_toward_smaller_key(self):
        db = KnnDatabase([(100.0, 0.1), (104.0, 0.9), (96.0, 0.5)], k=2)
        # query 100: distances 0, 4, 4 -> tie between 96 and 104, prefer 96
        assert knn_predict_qloss(db, 100.0) == pytest.approx((0.1 + 0.5) / 2)

    def test_result_within_selected_range(self, rng):
        pairs = [(float(k), float(v)) for k, v in
                 zip(rng.random(64) * 10, rng.random(64))]
        db = KnnDatabase(pairs, k=4)
        q = 5.0
        chosen = db.nearest(q)
        out = knn_predict_qloss(db, q)
        vals = [v for _, v in chosen]
        assert min(vals) - 1e-12 <= out <= max(vals) + 1e-12

    def test_build_database_counts(self, rng):
        problems = []
        for k in range(3):
            geo = random_geometry(rng, 8, 8, n_blocks=1)
            cfg = SimConfig(n_steps=3, dt=0.1, buoyancy=1.0)
            density = ScalarField.zeros(geo.dims)
            density.values[3:5, 1:3] = 1.0
            problems.append((f"p{k}", SimState.initial(geo, cfg.dt, density=density), cfg))
        selected = [ranked("a", 1.0, 0.1, 0.9, iters=1), ranked("b", 2.0, 0.05, 0.8, iters=2)]
        db, failures = build_knn_database(selected, problems, k=2)
        assert len(db) == 6
        assert failures == 0
        keys = [k for k, _ in db.in_order()]
        assert keys == sorted(keys)


class TestDecide:
    def test_worked_example_switch_to_m3(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        d = decide(0.019, req, sel[0], sel)
        assert d.kind == SWITCH_ACCURATE
        assert d.target.id == "M3"

    def test_worked_example_then_m5_then_continue(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        d = decide(0.015, req, sel[2], sel, abandoned=frozenset({"M1"}))
        assert d.kind == SWITCH_ACCURATE and d.target.id == "M5"
        d = decide(0.013, req, sel[4], sel, abandoned=frozenset({"M1", "M3"}))
        assert d.kind == CONTINUE

    def test_faster_direction(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        d = decide(0.001, req, sel[0], sel)
        assert d.kind == SWITCH_FASTER
        assert d.target.id == "M2"  # the only faster candidate

    def test_far_below_with_no_faster_continues(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        d = decide(0.001, req, sel[1], sel)  # M2 is already the fastest
        assert d.kind == CONTINUE

    def test_restart_when_nothing_more_accurate(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        d = decide(0.5, req, sel[4], sel)  # M5 is already the most accurate
        assert d.kind == RESTART

    def test_bands_partition_axis(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        eps = 0.05 * req.q
        kinds = []
        for q_pred in np.linspace(0.0, 0.05, 400):
            kinds.append(decide(float(q_pred), req, sel[2], sel).kind)
        # contiguous: faster..., continue..., accurate/restart...
        changes = [i for i in range(1, len(kinds)) if kinds[i] != kinds[i - 1]]
        assert len(changes) == 2
        assert kinds[0] == SWITCH_FASTER
        assert kinds[-1] == SWITCH_ACCURATE

    def test_abandoned_skipped_unless_only_option(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        # from M4 (0.018): more accurate are M3, M5; M3 abandoned -> M5 (0.74)
        d = decide(0.5, req, sel[3], sel, abandoned=frozenset({"M3"}))
        assert d.target.id == "M5"
        # both abandoned: M3 and M5 remain the only options -> revisit best r_hat
        d = decide(0.5, req, sel[3], sel, abandoned=frozenset({"M3", "M5"}))
        assert d.kind == SWITCH_ACCURATE and d.target.id == "M3"

    def test_pure_function(self):
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        a = decide(0.019, req, sel[0], sel)
        b = decide(0.019, req, sel[0], sel)
        assert a == b


class TestRunAdaptive:
    def problem(self, rng, n=12, steps=25):
        geo = random_geometry(rng, n, n, n_blocks=1)
        cfg = SimConfig(n_steps=steps, dt=0.1, buoyancy=1.0)
        density = ScalarField.zeros(geo.dims)
        density.values[4:8, 1:3] = 1.0
        return SimState.initial(geo, cfg.dt, density=density), cfg

    def test_empty_selection_pure_pcg(self, rng):
        state, cfg = self.problem(rng, steps=6)
        req = UserRequirement(0.013, 1e9)
        report = run_adaptive(state, [], req, None, cfg)
        assert report.final_qloss == 0.0
        assert report.intervals == []
        assert not report.restarted

    def test_golden_switch_trace(self, rng):
        state, cfg = self.problem(rng, steps=25)
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        preds = iter([0.019, 0.015, 0.013])
        report = run_adaptive(state, sel, req, None, cfg,
                              qloss_predictor=lambda cum: next(preds))
        assert report.decisions == [SWITCH_ACCURATE, SWITCH_ACCURATE, CONTINUE]
        assert [r.model_id for r in report.intervals] == ["M1", "M3", "M5"]
        assert [r.target_id for r in report.intervals] == ["M3", "M5", None]
        rows = interval_rows(report)
        assert [r[5] for r in rows] == report.decisions

    def test_deterministic(self, rng):
        state, cfg = self.problem(rng, steps=18)
        sel = worked_five()
        req = UserRequirement(0.013, 6.64)
        db = KnnDatabase([(1.0, 0.01), (2.0, 0.02), (3.0, 0.05), (4.0, 0.2)], k=4)
        r1 = run_adaptive(state, sel, req, db, cfg, seconds_per_flop=1e-9)
        r2 = run_adaptive(state, sel, req, db, cfg, seconds_per_flop=1e-9)
        assert r1.decisions == r2.decisions
        assert np.array_equal(r1.trajectory.final.density.values,
                              r2.trajectory.final.density.values)
        assert r1.total_cost.wall_time == r2.total_cost.wall_time

    def test_restart_matches_scratch_pcg_bit_exactly(self, rng):
        state, cfg = self.problem(rng, steps=14)
        solo = [ranked("only", 1.0, 0.02, 0.9, iters=1)]
        req = UserRequirement(0.001, 1e9)  # unreachable quality bound
        report = run_adaptive(state, solo, req, None, cfg,
                              qloss_predictor=lambda cum: 1.0)
        assert report.restarted
        assert report.decisions[-1] == RESTART
        assert report.final_qloss == 0.0
        scratch = simulate(state, cfg, PcgPressureSolver(cfg.dt))
        assert np.array_equal(report.trajectory.final.density.values,
                              scratch.final.density.values)
        assert np.array_equal(report.trajectory.final.vel.u, scratch.final.vel.u)

    def test_restart_cost_includes_wasted_steps(self, rng):
        state, cfg = self.problem(rng, steps=14)
        solo = [ranked("only", 1.0, 0.02, 0.9, iters=1)]
        req = UserRequirement(0.001, 1e9)
        report = run_adaptive(state, solo, req, None, cfg, seconds_per_flop=1e-9,
                              qloss_predictor=lambda cum: 1.0)
        scratch = simulate(state, cfg, PcgPressureSolver(cfg.dt), modeled_time=1e-9)
        assert report.total_cost.flops > scratch.total_cost.flops

    def test_requires_valid_config(self):
        with pytest.raises(ArgumentError):
            RuntimeConfig(check_interval=2)
        with pytest.raises(ArgumentError):
            RuntimeConfig(skip_in_interval=5, check_interval=5)
        with pytest.raises(ArgumentError):
            RuntimeConfig(epsilon_rel=0.7)


class TestPerCandidateDatabase:
    def test_per_candidate_flag_builds_split_trees(self, rng):
        problems = []
        for k in range(2):
            geo = random_geometry(rng, 8, 8, n_blocks=1)
            cfg = SimConfig(n_steps=3, dt=0.1, buoyancy=1.0)
            density = ScalarField.zeros(geo.dims)
            density.values[3:5, 1:3] = 1.0
            problems.append((f"p{k}", SimState.initial(geo, cfg.dt, density=density), cfg))
        selected = [ranked("a", 1.0, 0.1, 0.9, iters=1),
                    ranked("b", 2.0, 0.05, 0.8, iters=2)]
        dbs, failures = build_knn_database(selected, problems, k=1,
                                           per_candidate=True)
        assert set(dbs) == {"a", "b"}
        assert all(len(db) == 2 for db in dbs.values())
