import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdr.errors import InvalidInputError, TrainingDivergedError
from cdr.numeric import (
    DiscreteJoint,
    MlpParams,
    SampleSet,
    TrainConfig,
    derangement,
    entropy,
    evaluate_loss,
    gradient_check,
    mi_critic,
    mi_exact,
    mi_histogram,
    mlp_forward,
    mlp_train,
)
from cdr.rng import stream

JOINT_2X2 = [[0.4, 0.1], [0.1, 0.4]]


def mi_2x2_oracle():
    """Four-cell summation in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    p = [[mpmath.mpf(4) / 10, mpmath.mpf(1) / 10], [mpmath.mpf(1) / 10, mpmath.mpf(4) / 10]]
    half = mpmath.mpf(1) / 2
    return float(sum(p[i][j] * mpmath.log(p[i][j] / (half * half)) for i in range(2) for j in range(2)))


def reference_forward(params, x):
    """Scalar-loop forward pass used as an independent oracle."""
    act = list(map(float, x))
    n_layers = len(params.weights)
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = [sum(w[r][c] * act[c] for c in range(len(act))) + b[r] for r in range(len(b))]
        if li < n_layers - 1:
            act = [math.tanh(v) if params.activation == "tanh" else max(0.0, v) for v in z]
        elif params.output_activation == "sigmoid":
            act = [1.0 / (1.0 + math.exp(-v)) for v in z]
        else:
            act = z
    return act


def perceptron_separable(x, y, max_epochs=1000):
    """Classic perceptron; converges iff the data are linearly separable."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    s = np.where(y > 0.5, 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(max_epochs):
        mistakes = 0
        for xi, si in zip(xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


class TestMlpParams:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            MlpParams((2, 3), (np.zeros((2, 3)),), (np.zeros(3),))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            MlpParams((1, 1), (np.array([[np.nan]]),), (np.zeros(1),))

    def test_unknown_activation_rejected(self):
        with pytest.raises(InvalidInputError):
            MlpParams.zeros((2, 1), activation="gelu")

    def test_arrays_are_frozen(self):
        p = MlpParams.init((2, 3, 1), seed=1)
        with pytest.raises(ValueError):
            p.weights[0][0, 0] = 1.0

    def test_dict_round_trip(self):
        p = MlpParams.init((3, 5, 2), seed=7, activation="relu", output_activation="sigmoid")
        assert MlpParams.from_dict(p.to_dict()) == p

    def test_flat_round_trip(self):
        p = MlpParams.init((3, 4, 1), seed=2)
        assert p.with_flat(p.flat()) == p
        assert p.flat().size == 3 * 4 + 4 + 4 * 1 + 1


class TestForward:
    def test_identity_network(self):
        p = MlpParams((2, 2), (np.eye(2),), (np.zeros(2),))
        np.testing.assert_array_equal(mlp_forward(p, [0.3, 0.7]), [0.3, 0.7])

    def test_zero_network_gives_zero(self):
        p = MlpParams.zeros((3, 5, 4, 2))
        np.testing.assert_array_equal(mlp_forward(p, [1.0, -2.0, 3.0]), np.zeros(2))

    def test_matches_reference_forward(self):
        p = MlpParams.init((2, 4, 1), seed=11, init_scale=1.0, activation="tanh", output_activation="sigmoid")
        x = [0.37, -1.2]
        np.testing.assert_allclose(mlp_forward(p, x), reference_forward(p, x), rtol=0, atol=1e-12)

    def test_relu_matches_reference(self):
        p = MlpParams.init((3, 6, 6, 2), seed=3, init_scale=1.0, activation="relu")
        x = [0.5, -0.25, 2.0]
        np.testing.assert_allclose(mlp_forward(p, x), reference_forward(p, x), rtol=0, atol=1e-12)

    def test_batch_matches_rows(self):
        p = MlpParams.init((2, 4, 1), seed=5)
        xs = stream(0, 9).normal(size=(6, 2))
        batch = mlp_forward(p, xs)
        for row, out in zip(xs, batch):
            np.testing.assert_allclose(mlp_forward(p, row), out, rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        p = MlpParams.init((2, 4, 1), seed=5)
        with pytest.raises(InvalidInputError):
            mlp_forward(p, [1.0, 2.0, 3.0])

    def test_non_finite_input(self):
        p = MlpParams.init((2, 1), seed=5)
        with pytest.raises(InvalidInputError):
            mlp_forward(p, [1.0, np.inf])


class TestTrain:
    @staticmethod
    def separable_data(n=200):
        g = stream(4, 0)
        x = g.uniform(-1, 1, size=(n, 2))
        margin = x[:, 0] + x[:, 1]
        keep = np.abs(margin) > 0.2
        x = x[keep]
        y = (x[:, 0] + x[:, 1] > 0).astype(float)
        return x, y

    def test_separable_reaches_full_accuracy(self):
        x, y = self.separable_data()
        assert perceptron_separable(x, y)
        p = MlpParams.init((2, 1), seed=0, output_activation="sigmoid")
        p = mlp_train(p, SampleSet(x, y), "binary_cross_entropy", TrainConfig(0.5, 200, 16, 0))
        pred = mlp_forward(p, x)[:, 0] >= 0.5
        assert np.mean(pred == (y == 1)) == 1.0

    def test_zero_target_loss_does_not_increase(self):
        x = stream(1, 0).normal(size=(50, 3))
        data = SampleSet(x, np.zeros(50))
        p = MlpParams.init((3, 4, 1), seed=1)
        before = evaluate_loss(p, data, "squared_error")
        after = evaluate_loss(mlp_train(p, data, "squared_error", TrainConfig(0.05, 50, 50, 1)), data,
                              "squared_error")
        assert after <= before

    def test_full_batch_history_non_increasing(self):
        x = stream(2, 0).normal(size=(40, 2))
        y = 0.3 * x[:, :1] - 0.1 * x[:, 1:]
        hist = []
        p = MlpParams.init((2, 1), seed=2)
        mlp_train(p, SampleSet(x, y), "squared_error", TrainConfig(0.1, 30, 40, 2), history=hist)
        assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))

    def test_bit_identical_reruns(self):
        x, y = self.separable_data(80)
        cfg = TrainConfig(0.3, 20, 8, 123)
        p = MlpParams.init((2, 3, 1), seed=123, output_activation="sigmoid")
        a = mlp_train(p, SampleSet(x, y), "binary_cross_entropy", cfg)
        b = mlp_train(p, SampleSet(x, y), "binary_cross_entropy", cfg)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_input_params_not_mutated(self):
        x, y = self.separable_data(40)
        p = MlpParams.init((2, 1), seed=0)
        before = p.flat().copy()
        mlp_train(p, SampleSet(x, y), "squared_error", TrainConfig(0.1, 3, 4, 0))
        np.testing.assert_array_equal(p.flat(), before)

    def test_divergence_reports_epoch(self):
        x = np.linspace(-50, 50, 20).reshape(-1, 1)
        p = MlpParams.init((1, 1), seed=0)
        with pytest.raises(TrainingDivergedError) as info:
            mlp_train(p, SampleSet(x, 1e3 * x), "squared_error", TrainConfig(10.0, 50, 20, 0))
        assert info.value.epoch >= 0

    def test_shape_mismatch_rejected(self):
        p = MlpParams.init((2, 1), seed=0)
        with pytest.raises(InvalidInputError):
            mlp_train(p, SampleSet(np.zeros((4, 3)), np.zeros(4)), "squared_error", TrainConfig())

    def test_unknown_loss_rejected(self):
        p = MlpParams.init((2, 1), seed=0)
        with pytest.raises(InvalidInputError):
            mlp_train(p, SampleSet(np.zeros((4, 2)), np.zeros(4)), "hinge", TrainConfig())

    @pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(epochs=0), dict(batch_size=0),
                                        dict(seed=-1), dict(init_scale=0)])
    def test_config_invariants(self, kwargs):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kwargs)


class TestGradientCheck:
    def test_squared_error_4_8_1(self):
        p = MlpParams.init((4, 8, 1), seed=21, init_scale=0.8)
        x = stream(21, 1).normal(size=(5, 4))
        t = stream(21, 2).normal(size=(5, 1))
        assert gradient_check(p, x, t, "squared_error") <= 1e-4

    def test_binary_cross_entropy(self):
        p = MlpParams.init((3, 6, 1), seed=22, output_activation="sigmoid")
        x = stream(22, 1).normal(size=(6, 3))
        t = (stream(22, 2).random(size=(6, 1)) < 0.5).astype(float)
        assert gradient_check(p, x, t, "binary_cross_entropy") <= 1e-4

    def test_dv_objective_20_samples(self):
        p = MlpParams.init((2, 16, 16, 1), seed=23)
        g = stream(23, 1)
        x = g.normal(size=20)
        y = 0.8 * x + 0.6 * g.normal(size=20)
        assert gradient_check(p, x, y, "dv_mi_objective") <= 1e-4

    def test_zero_net_output_bias_exact(self):
        p = MlpParams.zeros((3, 4, 1))
        x = np.array([[0.2, -0.4, 1.0]])
        # output bias is the last flat parameter; at zero weights the loss is quadratic in it
        from cdr.numeric import _loss_and_grad

        _, (gw, gb) = _loss_and_grad(p, x, np.zeros((1, 1)), "squared_error")
        theta = p.flat()
        h = 1e-5
        lp = evaluate_loss(p.with_flat(np.r_[theta[:-1], theta[-1] + h]), SampleSet(x, [0.0]), "squared_error")
        lm = evaluate_loss(p.with_flat(np.r_[theta[:-1], theta[-1] - h]), SampleSet(x, [0.0]), "squared_error")
        assert abs(gb[-1][0] - (lp - lm) / (2 * h)) <= 1e-6
        assert gradient_check(p, x, [[0.0]], "squared_error") <= 1e-4

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32), act=st.sampled_from(["tanh", "relu"]))
    def test_random_networks(self, seed, act):
        p = MlpParams.init((3, 5, 1), seed=seed, activation=act)
        x = stream(seed, 1).normal(size=(4, 3))
        t = stream(seed, 2).normal(size=(4, 1))
        # relu kinks can sit within a finite-difference step of an input; shift away from them
        assert gradient_check(p, x, t, "squared_error") <= (1e-4 if act == "tanh" else 1e-3)


class TestEntropy:
    def test_degenerate(self):
        assert entropy([1.0, 0.0, 0.0]) == 0.0

    def test_uniform(self):
        assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)

    def test_four_term_oracle(self):
        p = [0.4, 0.4, 0.1, 0.1]
        mpmath.mp.dps = 50
        want = float(-sum(mpmath.mpf(v) * mpmath.log(mpmath.mpf(v)) for v in ("0.4", "0.4", "0.1", "0.1")))
        assert entropy(p) == pytest.approx(want, abs=1e-14)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [np.nan, 1.0]])
    def test_invalid(self, bad):
        with pytest.raises(InvalidInputError):
            entropy(bad)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8).filter(lambda v: sum(v) > 1e-3))
    def test_bounds_and_permutation(self, raw):
        p = np.array(raw) / sum(raw)
        h = entropy(p)
        assert 0.0 <= h <= math.log(len(p)) + 1e-12
        assert entropy(p[::-1]) == pytest.approx(h, abs=1e-12)


class TestMutualInformation:
    def test_product_is_zero(self):
        j = np.outer([0.2, 0.3, 0.5], [0.6, 0.4])
        assert mi_exact(j) <= 1e-12

    def test_diagonal_is_ln4(self):
        assert mi_exact(np.eye(4) / 4) == pytest.approx(math.log(4), abs=1e-12)

    def test_2x2_matches_oracle(self):
        assert mi_exact(JOINT_2X2) == pytest.approx(mi_2x2_oracle(), abs=1e-12)
        assert mi_2x2_oracle() == pytest.approx(0.19274, abs=1e-5)

    def test_invalid_joint(self):
        with pytest.raises(InvalidInputError):
            DiscreteJoint([[0.5, 0.4]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**32))
    def test_symmetry_bounds_and_merging(self, nx, ny, seed):
        p = stream(seed, 0).random((nx, ny)) + 1e-3
        j = DiscreteJoint(p / p.sum())
        i = mi_exact(j)
        assert mi_exact(j.transpose()) == pytest.approx(i, abs=1e-12)
        assert i <= min(entropy(j.px), entropy(j.py)) + 1e-12
        merged = np.column_stack([j.probabilities[:, 0] + j.probabilities[:, 1], j.probabilities[:, 2:]])
        assert mi_exact(merged) <= i + 1e-12


class TestHistogramEstimator:
    def test_independent_uniforms(self):
        g = stream(5, 0)
        assert mi_histogram(SampleSet(g.random(10_000), g.random(10_000)), 8) <= 0.05

    def test_exact_copy_is_ln_bins(self):
        x = (np.arange(8000) + 0.5) / 8000
        assert mi_histogram(SampleSet(x, x), 8) == pytest.approx(math.log(8), abs=1e-9)

    @staticmethod
    def sample_2x2(n, seed):
        cells = stream(seed, 0).choice(4, size=n, p=np.ravel(JOINT_2X2))
        return SampleSet((cells // 2).astype(float), (cells % 2).astype(float))

    def test_discrete_2x2_at_50k(self):
        assert abs(mi_histogram(self.sample_2x2(50_000, 7), 2) - mi_2x2_oracle()) <= 0.03

    def test_error_shrinks_with_n(self):
        errs = [abs(mi_histogram(self.sample_2x2(n, 7), 2) - mi_2x2_oracle()) for n in (1_000, 10_000, 50_000)]
        assert errs[2] <= errs[0]
        assert errs[2] <= 0.01

    def test_rejects_single_bin(self):
        with pytest.raises(InvalidInputError):
            mi_histogram(SampleSet([0.0, 1.0], [0.0, 1.0]), 1)


class TestDerangement:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 2**32))
    def test_no_fixed_points(self, n, seed):
        d = derangement(n, stream(seed))
        assert sorted(d) == list(range(n))
        assert np.all(d != np.arange(n))


class TestCritic:
    @staticmethod
    def gaussian(rho, n, seed):
        g = stream(seed, 0)
        x = g.normal(size=n)
        y = rho * x + math.sqrt(1 - rho**2) * g.normal(size=n)
        return SampleSet(x, y)

    def test_gaussian_rho_09(self):
        truth = -0.5 * math.log(1 - 0.81)
        est = mi_critic(self.gaussian(0.9, 10_000, 1))
        assert abs(est - truth) <= 0.15 * truth

    def test_independent(self):
        assert mi_critic(self.gaussian(0.0, 10_000, 2)) <= 0.05

    def test_deterministic(self):
        data = self.gaussian(0.5, 500, 3)
        cfg = TrainConfig(0.1, 5, 64, 9)
        assert mi_critic(data, cfg) == mi_critic(data, cfg)

    def test_needs_100_samples(self):
        with pytest.raises(InvalidInputError):
            mi_critic(self.gaussian(0.5, 99, 3))
