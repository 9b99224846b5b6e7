import numpy as np
import pytest

from plumeflow.errors import ArgumentError
from plumeflow.forge import ExecutionRecord, SolverCandidate, iterative_family
from plumeflow.mlp import (
    FEATURE_LENGTH,
    LabeledSample,
    MlpTrainConfig,
    UserRequirement,
    build_feature_vector,
    expected_total_time,
    generate_samples,
    init_mlp,
    label_success_rate,
    load_mlp,
    mlp_from_document,
    mlp_to_document,
    predict_success,
    requirement_grid,
    save_mlp,
    select_candidates,
    train_mlp,
)
from plumeflow.nn import LayerSpec, conv, init_network, relu

from oracles import dense_layer_loop


def net_candidate(layers, cid="nn1", seed=0, mean_time=1.0, mean_qloss=0.1):
    net = init_network(layers, seed=seed)
    return SolverCandidate(id=cid, source="seed", net=net,
                           mean_time=mean_time, mean_qloss=mean_qloss)


def make_records(cid, qlosses, times):
    return [ExecutionRecord(cid, f"p{i}", q, t)
            for i, (q, t) in enumerate(zip(qlosses, times))]


class TestFeatureVector:
    def test_length_48(self):
        req = UserRequirement(0.01, 5.0)
        cand = net_candidate([conv(4), relu(), conv(1)])
        f = build_feature_vector(req, cand)
        assert f.shape == (FEATURE_LENGTH,) and FEATURE_LENGTH == 48

    def test_padding_beyond_layer_count(self):
        req = UserRequirement(0.01, 5.0)
        cand = net_candidate([conv(4), conv(1)])
        f = build_feature_vector(req, cand)
        assert f[2] == 2
        for block_start in (3, 12, 21, 30, 39):
            assert (f[block_start + 2 : block_start + 9] == 0).all()

    def test_requirement_only_in_first_two(self):
        cand = net_candidate([conv(4), relu(), conv(1)])
        f1 = build_feature_vector(UserRequirement(0.01, 5.0), cand)
        f2 = build_feature_vector(UserRequirement(0.05, 9.0), cand)
        assert f1[0] != f2[0] and f1[1] != f2[1]
        assert np.array_equal(f1[2:], f2[2:])

    def test_layer_kind_slots(self):
        layers = [conv(4, kernel=5), LayerSpec("maxpool", pool=2),
                  relu(residual_from=1), LayerSpec("unpool", pool=2), conv(1)]
        cand = net_candidate(layers)
        f = build_feature_vector(UserRequirement(0.1, 1.0), cand)
        assert f[3] == 5 and f[12] == 4          # conv kernel/channels slot 0
        assert f[21 + 1] == 2                    # pool factor at layer 1
        assert f[39 + 2] == 2                    # residual_from 1 stored 1-based
        assert f[30 + 3] == 2                    # unpool factor at layer 3
        assert f[3 + 4] == 3 and f[12 + 4] == 1  # final conv slots

    def test_iterative_encoding(self):
        cand = iterative_family((8,))[0]
        f = build_feature_vector(UserRequirement(0.1, 1.0), cand)
        assert f[2] == 0
        assert f[12] == 8
        assert np.count_nonzero(f) == 3  # q, t, chn[0]


class TestLabels:
    def test_loose_requirement(self):
        recs = make_records("a", [0.1, 0.2], [1.0, 2.0])
        assert label_success_rate(recs, UserRequirement(1.0, 10.0)) == 1.0

    def test_tight_requirement(self):
        recs = make_records("a", [0.1, 0.2], [1.0, 2.0])
        assert label_success_rate(recs, UserRequirement(0.01, 0.5)) == 0.0

    def test_counting(self):
        qs = [0.1] * 7 + [0.9] * 3
        recs = make_records("a", qs, [1.0] * 10)
        assert label_success_rate(recs, UserRequirement(0.5, 2.0)) == pytest.approx(0.7)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            label_success_rate([], UserRequirement(1.0, 1.0))

    def test_monotone_in_q_and_t(self, rng):
        recs = make_records("a", rng.random(20), rng.random(20) * 10)
        qs = np.linspace(0.05, 1.0, 8)
        ts = np.linspace(0.5, 10.0, 8)
        for t in ts:
            rates = [label_success_rate(recs, UserRequirement(q, t)) for q in qs]
            assert all(a <= b + 1e-12 for a, b in zip(rates, rates[1:]))
        for q in qs:
            rates = [label_success_rate(recs, UserRequirement(q, t)) for t in ts]
            assert all(a <= b + 1e-12 for a, b in zip(rates, rates[1:]))


class TestSamples:
    def test_single_pair_grid(self, rng):
        cands = iterative_family((1, 2, 4, 8, 16, 32))[:6]
        records = []
        for c in cands:
            records += make_records(c.id, rng.random(5), rng.random(5))
        grid = [UserRequirement(0.5, 0.5)]
        samples = generate_samples(records, cands, grid)
        assert len(samples) == 6

    def test_labels_in_unit_interval_and_grid_product(self, rng):
        cands = iterative_family((1, 2))
        records = []
        for c in cands:
            records += make_records(c.id, rng.random(10), rng.random(10))
        grid = requirement_grid(records)
        samples = generate_samples(records, cands, grid)
        assert len(samples) == len(cands) * len(grid)
        assert all(0.0 <= s.label <= 1.0 for s in samples)


class TestMlp:
    def test_predict_bounded(self, rng):
        mlp = init_mlp(seed=1)
        for _ in range(1000):
            f = rng.standard_normal(FEATURE_LENGTH) * 10
            out = predict_success(mlp, f)
            assert 0.0 < out < 1.0

    def test_predict_matches_dense_loop_oracle(self, rng):
        mlp = init_mlp(seed=2)
        mlp.feature_scale = rng.uniform(0.5, 2.0, FEATURE_LENGTH)
        f = rng.standard_normal(FEATURE_LENGTH)
        x = f / mlp.feature_scale
        for li, (w, b) in enumerate(mlp.weights):
            x = dense_layer_loop(x, w, b)
            if li < len(mlp.weights) - 1:
                x = np.maximum(x, 0.0)
            else:
                x = 1.0 / (1.0 + np.exp(-x))
        assert predict_success(mlp, f) == pytest.approx(float(x[0]), abs=1e-10)

    def test_bit_stable(self, rng):
        mlp = init_mlp(seed=3)
        f = rng.standard_normal(FEATURE_LENGTH)
        assert predict_success(mlp, f) == predict_success(mlp, f)

    def test_wrong_length_rejected(self):
        mlp = init_mlp()
        with pytest.raises(ArgumentError):
            predict_success(mlp, np.zeros(47))

    def test_topologies_constructible(self):
        for name in ("mlp1", "mlp2", "mlp3", "mlp4", "mlp5"):
            init_mlp(name)

    def test_default_topology_sizes(self):
        mlp = init_mlp("mlp3")
        assert mlp.sizes == [48, 32, 32, 16, 8, 1]


class TestTrainMlp:
    def fake_samples(self, rng, n=60):
        samples = []
        for _ in range(n):
            f = rng.random(FEATURE_LENGTH) * 5
            label = float(np.clip(f[0] / 5.0, 0, 1))  # success tracks q slot
            samples.append(LabeledSample(tuple(f), label))
        return samples

    def test_zero_lr_keeps_weights(self, rng):
        samples = self.fake_samples(rng)
        cfg = MlpTrainConfig(epochs=2, learning_rate=0.0, seed=4)
        mlp, curve = train_mlp(samples, cfg)
        fresh = init_mlp(seed=4)
        for (w1, b1), (w2, b2) in zip(mlp.weights, fresh.weights):
            assert np.array_equal(w1, w2)
            assert np.array_equal(b1, b2)

    def test_constant_labels_converge_to_mean(self, rng):
        samples = [LabeledSample(tuple(rng.random(FEATURE_LENGTH)), 0.5)
                   for _ in range(40)]
        cfg = MlpTrainConfig(epochs=500, learning_rate=0.2, seed=5)
        mlp, _ = train_mlp(samples, cfg)
        for _ in range(20):
            f = rng.random(FEATURE_LENGTH)
            assert abs(predict_success(mlp, f) - 0.5) < 0.05

    def test_loss_decreases(self, rng):
        samples = self.fake_samples(rng)
        mlp, curve = train_mlp(samples, MlpTrainConfig(epochs=100, seed=6))
        assert curve[-1] < curve[0]

    def test_deterministic(self, rng):
        samples = self.fake_samples(rng, 30)
        m1, c1 = train_mlp(samples, MlpTrainConfig(epochs=5, seed=7))
        m2, c2 = train_mlp(samples, MlpTrainConfig(epochs=5, seed=7))
        assert c1 == c2
        for (w1, _), (w2, _) in zip(m1.weights, m2.weights):
            assert np.array_equal(w1, w2)

    def test_too_few_samples(self, rng):
        with pytest.raises(ArgumentError):
            train_mlp(self.fake_samples(rng, 5))


class TestExpectedTotalTime:
    def test_extremes(self):
        assert expected_total_time(1.0, 2.0, 9.0) == 2.0
        assert expected_total_time(0.0, 2.0, 9.0) == 9.0

    def test_midpoint(self):
        assert expected_total_time(0.5, 1.0, 3.0) == pytest.approx(2.0)

    def test_bounds(self, rng):
        for _ in range(50):
            r = float(rng.random())
            tm = float(rng.uniform(0.1, 5))
            te = float(rng.uniform(0.1, 5))
            tot = expected_total_time(r, tm, te)
            assert min(tm, te) - 1e-12 <= tot <= max(tm, te) + 1e-12


class TestSelectCandidates:
    def candidates(self):
        specs = [
            ("M1", 1.0, 0.020), ("M2", 0.8, 0.025), ("M3", 1.5, 0.015),
            ("M4", 1.2, 0.018), ("M5", 2.0, 0.010),
        ]
        return [SolverCandidate(id=i, source="iterative", iters=1,
                                mean_time=t, mean_qloss=q) for i, t, q in specs]

    def test_loose_time_keeps_all_capped_at_five(self):
        cands = self.candidates() + [
            SolverCandidate(id="M6", source="iterative", iters=2,
                            mean_time=0.5, mean_qloss=0.03)
        ]
        stub = lambda f: 0.5
        got = select_candidates(stub, cands, UserRequirement(0.013, 1e9), time_exact=10.0)
        assert len(got) == 5

    def test_tight_time_empty(self):
        cands = self.candidates()
        stub = lambda f: 0.9
        # exact time 10 s, requirement 0.5 s: T_total >= 0.9*t_m + 1 > 0.5
        got = select_candidates(stub, cands, UserRequirement(0.013, 0.5), time_exact=10.0)
        assert got == []

    def test_worked_probability_ranking(self):
        cands = self.candidates()
        probs = {"M1": 0.91, "M2": 0.86, "M3": 0.82, "M4": 0.79, "M5": 0.74}
        by_time = {c.mean_time: c.id for c in cands}

        def stub(features):
            # identify the candidate through its unique mean_time... the
            # feature vector carries iters only, so key on q/t slots is not
            # possible; selection is exercised with a per-call closure instead
            raise AssertionError("replaced below")

        # bind predictions by candidate identity via an id->prob wrapper
        calls = []

        def make_predictor():
            order = iter(cands)

            def predict(features):
                cand = next(order)
                return probs[cand.id]

            return predict

        got = select_candidates(make_predictor(), cands,
                                UserRequirement(0.013, 1e9), time_exact=10.0)
        assert [rc.id for rc in got] == ["M1", "M2", "M3", "M4", "M5"]
        assert [rc.r_hat for rc in got] == [0.91, 0.86, 0.82, 0.79, 0.74]

    def test_ordering_stable_under_input_shuffle(self, rng):
        cands = self.candidates()
        probs = {"M1": 0.91, "M2": 0.86, "M3": 0.82, "M4": 0.79, "M5": 0.74}

        def run(order):
            seq = iter(order)

            def predict(features):
                return probs[next(seq).id]

            return [rc.id for rc in select_candidates(
                predict, order, UserRequirement(0.013, 1e9), time_exact=10.0)]

        base = run(cands)
        for _ in range(5):
            shuffled = list(cands)
            rng.shuffle(shuffled)
            assert run(shuffled) == base


class TestPersistence:
    def test_roundtrip(self, tmp_path, rng):
        mlp = init_mlp(seed=9)
        mlp.feature_scale = rng.uniform(0.5, 2.0, FEATURE_LENGTH)
        path = tmp_path / "mlp.json"
        save_mlp(mlp, path)
        loaded = load_mlp(path)
        assert loaded.sizes == mlp.sizes
        assert np.array_equal(loaded.feature_scale, mlp.feature_scale)
        for (w1, b1), (w2, b2) in zip(loaded.weights, mlp.weights):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_version_check(self):
        doc = mlp_to_document(init_mlp())
        doc["version"] = 42
        from plumeflow.errors import FormatError

        with pytest.raises(FormatError):
            mlp_from_document(doc)
