import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hardlabel.errors import (BudgetExhausted, ParameterError, TrainingDivergedError,
                              UnsupportedVictimError)
from hardlabel.gaussmix import Dataset, LabeledSample, LinearClassifier, make_spec, sample_dataset
from hardlabel.oracle import (MAGIC, HardLabelOracle, LinearVictim, MlpVictim, SmoothedVictim,
                              SmoothingConfig, index_to_label, input_gradient, label_to_index,
                              load_victim, majority, predict, save_victim, smoothed_predict,
                              smoothing_noise, train_mlp, unpack_container, vote_counts)


def small_mlp(seed=0, activation="tanh", widths=(3, 5, 2), bias=True):
    rng = np.random.default_rng(seed)
    Ws = [rng.standard_normal((a, b)) for a, b in zip(widths[:-1], widths[1:])]
    bs = [rng.standard_normal(b) if bias else np.zeros(b) for b in widths[1:]]
    return MlpVictim(Ws, bs, activation)


class TestLabels:
    def test_mapping(self):
        assert list(label_to_index([-1, 1])) == [0, 1]
        assert list(index_to_label([0, 1])) == [-1, 1]

    def test_linear_predict(self):
        o = HardLabelOracle(LinearVictim([1.0, -2.0]))
        assert predict(o, [3.0, 1.0]) == 1
        assert predict(o, [-3.0, 1.0]) == 0

    def test_counting(self):
        o = HardLabelOracle(LinearVictim([1.0]))
        for i in range(100):
            o.predict([float(i)])
        assert o.query_count == 100

    def test_dimension_mismatch(self):
        o = HardLabelOracle(LinearVictim([1.0, 2.0]))
        with pytest.raises(ParameterError):
            o.predict([1.0])
        assert o.query_count == 0

    def test_agrees_with_reference_sign(self, rng):
        w = rng.standard_normal(8)
        X = rng.standard_normal((10**5, 8))
        victim = LinearVictim(w)
        ref = label_to_index(LinearClassifier(w)(X))
        assert np.array_equal(victim.labels(X), ref)
        o = HardLabelOracle(victim)
        idx = rng.choice(10**5, 200, replace=False)
        assert [o.predict(X[i]) for i in idx] == list(ref[idx])

    def test_victim_does_not_alias_input(self):
        w = np.array([1.0, 2.0])
        v = LinearVictim(w)
        w[0] = -5.0
        assert v.w[0] == 1.0
        assert w.flags.writeable

    def test_budget(self):
        o = HardLabelOracle(LinearVictim([1.0]), budget=3)
        for _ in range(3):
            o.predict([1.0])
        with pytest.raises(BudgetExhausted):
            o.predict([1.0])
        assert o.query_count == 3

    def test_metered_rebases(self):
        o = HardLabelOracle(LinearVictim([1.0]))
        o.predict([1.0])
        seen = []
        with o.metered(2, lambda i, x, y: seen.append(i)):
            o.predict([1.0])
            o.predict([1.0])
            with pytest.raises(BudgetExhausted):
                o.predict([1.0])
        assert seen == [1, 2]
        o.predict([1.0])
        assert o.query_count == 4 and o.budget is None

    def test_label_free_not_counted(self):
        o = HardLabelOracle(LinearVictim([1.0]))
        o.label_free([2.0])
        assert o.query_count == 0

    def test_concurrent_counter(self):
        o = HardLabelOracle(LinearVictim([1.0, 1.0]))

        def work():
            for _ in range(500):
                o.predict([0.3, -0.1])

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert o.query_count == 4000

    def test_fork_has_own_counter(self):
        o = HardLabelOracle(LinearVictim([1.0]))
        f = o.fork()
        f.predict([1.0])
        assert o.query_count == 0 and f.query_count == 1


class TestSmoothing:
    def test_tiny_noise_matches_base(self, rng):
        base = LinearVictim(rng.standard_normal(4))
        cfg = SmoothingConfig(1e-12, 25, seed=1)
        o = HardLabelOracle(base)
        for x in rng.standard_normal((50, 4)):
            assert smoothed_predict(o, x, cfg) == base.labels(x[None])[0]
        assert o.query_count == 50

    def test_single_round(self, rng):
        base = LinearVictim(rng.standard_normal(3))
        cfg = SmoothingConfig(0.5, 1, seed=4)
        x = rng.standard_normal(3)
        noise = smoothing_noise(cfg, 3)
        assert SmoothedVictim(base, cfg).labels(x[None])[0] == base.labels(x[None] + noise)[0]

    def test_symmetric_vote_on_boundary(self):
        base = LinearVictim([1.0, -1.0])
        x = np.array([0.7, 0.7])
        for seed in range(100):
            counts = vote_counts(base, x, smoothing_noise(SmoothingConfig(1.0, 10**4, seed), 2))
            assert abs(counts[1] / 10**4 - 0.5) <= 0.02

    def test_tie_goes_to_smaller_index(self):
        assert majority([5, 5]) == 0
        assert majority([2, 7, 7]) == 1

    def test_permutation_invariant(self, rng):
        base = LinearVictim(rng.standard_normal(3))
        noise = smoothing_noise(SmoothingConfig(2.0, 301, 0), 3)
        x = rng.standard_normal(3)
        a = vote_counts(base, x, noise)
        b = vote_counts(base, x, noise[rng.permutation(301)])
        assert np.array_equal(a, b)

    def test_deterministic(self, rng):
        v = SmoothedVictim(LinearVictim([1.0, 2.0]), SmoothingConfig(1.0, 51, 3))
        X = rng.standard_normal((20, 2))
        assert np.array_equal(v.labels(X), v.labels(X))

    def test_one_query_per_call(self):
        o = HardLabelOracle(SmoothedVictim(LinearVictim([1.0]), SmoothingConfig(1.0, 500)))
        o.predict([0.2])
        assert o.query_count == 1

    def test_bad_config(self):
        with pytest.raises(ParameterError):
            SmoothingConfig(0.0)
        with pytest.raises(ParameterError):
            SmoothingConfig(1.0, 0)

    def test_no_nested_smoothing(self):
        inner = SmoothedVictim(LinearVictim([1.0]), SmoothingConfig(1.0))
        with pytest.raises(UnsupportedVictimError):
            SmoothedVictim(inner, SmoothingConfig(1.0))


def separable_data():
    # d=2, class means at +-3 along a fixed direction, noise 0.3.
    spec = make_spec(2, sigma=0.3, seed=5)
    spec = type(spec)(spec.theta_star / np.linalg.norm(spec.theta_star) * 3, 0.3, 2)
    return sample_dataset(spec, 200, seed=6)


class TestTraining:
    def test_separable_accuracy(self):
        ds = separable_data()
        net = train_mlp(ds, [8, 2], epochs=300, learning_rate=0.5, seed=0)
        acc = np.mean(net.labels(ds.X) == label_to_index(ds.y))
        assert acc >= 0.99
        assert net.losses[-1] < net.losses[0] and net.converged

    def test_zero_epochs(self):
        ds = separable_data()
        a = train_mlp(ds, [4, 2], 0, 0.1, seed=3)
        b = train_mlp(ds, [4, 2], 0, 0.1, seed=3)
        assert a.losses == []
        for Wa, Wb in zip(a.weights, b.weights):
            assert np.array_equal(Wa, Wb)

    def test_deterministic(self):
        ds = separable_data()
        a = train_mlp(ds, [4, 2], 20, 0.1, seed=3)
        b = train_mlp(list(ds), [4, 2], 20, 0.1, seed=3)
        for Wa, Wb in zip(a.weights + a.biases, b.weights + b.biases):
            assert np.array_equal(Wa, Wb)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        ds = separable_data()
        with pytest.raises(TrainingDivergedError):
            train_mlp(ds, [16, 2], 200, 1e6, seed=0)

    def test_bad_widths(self):
        with pytest.raises(ParameterError):
            train_mlp(separable_data(), [4, 1], 1, 0.1, 0)

    def test_empty(self):
        with pytest.raises(ParameterError):
            train_mlp([], [2], 1, 0.1, 0)


def ce(net, x, t):
    z = net.logits(x[None])[0]
    return float(np.log(np.exp(z - z.max()).sum()) + z.max() - z[t])


class TestInputGradient:
    def test_linear_subgradient(self):
        assert input_gradient(LinearVictim([2.5]), [0.3], 0)[0] == 1.0
        assert input_gradient(LinearVictim([2.5]), [0.3], 1)[0] == -1.0

    def test_linear_sign_vector(self):
        g = input_gradient(LinearVictim([2.0, -0.1, 0.0]), np.zeros(3), 0)
        assert list(g) == [1.0, -1.0, 0.0]

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_finite_differences(self, activation):
        net = small_mlp(1, activation, (4, 6, 3))
        rng = np.random.default_rng(2)
        h = 1e-5
        for _ in range(20):
            x = rng.standard_normal(4)
            t = int(rng.integers(3))
            g = input_gradient(net, x, t)
            fd = np.array([(ce(net, x + h * e, t) - ce(net, x - h * e, t)) / (2 * h) for e in np.eye(4)])
            assert np.max(np.abs(g - fd)) <= 1e-4

    def test_odd_network_symmetry(self, rng):
        net = small_mlp(3, "tanh", (3, 5, 2), bias=False)
        for x in [np.zeros(3)] + list(rng.standard_normal((5, 3))):
            assert np.allclose(input_gradient(net, -x, 0), -input_gradient(net, x, 1), atol=1e-14)

    def test_smoothed_unsupported(self):
        v = SmoothedVictim(LinearVictim([1.0]), SmoothingConfig(1.0))
        with pytest.raises(UnsupportedVictimError):
            input_gradient(v, [0.0], 0)


class TestSerialization:
    def test_linear_roundtrip(self, tmp_path):
        v = LinearVictim([1.5, -2.0, 0.25], b=0.5)
        save_victim(v, tmp_path / "v.nmdl")
        blob = (tmp_path / "v.nmdl").read_bytes()
        assert blob[:4] == MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1 and blob[8] == 0
        assert np.frombuffer(blob[9:], "<f8").tolist() == [1.5, -2.0, 0.25, 0.5]
        w = load_victim(tmp_path / "v.nmdl")
        assert np.array_equal(w.w, v.w) and w.b == v.b

    def test_mlp_roundtrip(self, tmp_path, rng):
        net = small_mlp(4, "relu", (3, 7, 4, 2))
        save_victim(net, tmp_path / "m.nmdl")
        back = load_victim(tmp_path / "m.nmdl")
        X = rng.standard_normal((30, 3))
        assert np.array_equal(back.logits(X), net.logits(X))
        assert back.widths == [3, 7, 4, 2] and back.activation == "relu"

    def test_smoothed_roundtrip(self, tmp_path, rng):
        v = SmoothedVictim(LinearVictim([1.0, 1.0]), SmoothingConfig(0.5, 11, 2))
        save_victim(v, tmp_path / "s.nmdl")
        back = load_victim(tmp_path / "s.nmdl")
        X = rng.standard_normal((20, 2))
        assert np.array_equal(back.labels(X), v.labels(X))

    def test_bad_magic(self):
        with pytest.raises(ParameterError):
            unpack_container(b"XXXX" + bytes(5))
