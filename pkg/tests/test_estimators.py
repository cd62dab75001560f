"""Samplers, architecture-gradient estimators, and optimizers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from wirelens.autodiff import Tensor
from wirelens.cells import Network, NetworkSpec, build_minimal_cell
from wirelens.datasets import synth_dataset
from wirelens.estimators import (
    SGD,
    Adam,
    ArchSample,
    ArchState,
    arch_grad,
    darts_weights,
    sample_discrete,
    sample_gumbel_softmax,
)


def toy_state(logits=None, temperature=1.0, seed=0):
    logits = {(0, (0, 2)): np.zeros(8)} if logits is None else logits
    return ArchState(logits=logits, temperature=temperature, seed=seed)


class TestDartsWeights:
    def test_equal_logits_give_uniform(self):
        sample = darts_weights(toy_state())
        np.testing.assert_allclose(sample.weights[(0, (0, 2))], np.full(8, 0.125),
                                   atol=1e-15)

    def test_single_candidate_edge(self):
        state = toy_state({(0, (0, 1)): np.zeros(1)})
        sample = darts_weights(state)
        np.testing.assert_array_equal(sample.weights[(0, (0, 1))], [1.0])

    def test_closed_form_two_candidates(self):
        state = toy_state({(0, (0, 2)): np.array([0.0, np.log(3.0)])})
        sample = darts_weights(state)
        np.testing.assert_allclose(sample.weights[(0, (0, 2))], [0.25, 0.75],
                                   atol=1e-12)


class TestGumbelSoftmax:
    def test_near_zero_temperature_is_one_hot(self):
        state = toy_state(temperature=1e-4, seed=5)
        sample = sample_gumbel_softmax(state)
        w = sample.weights[(0, (0, 2))]
        assert w.max() > 0.999

    def test_equal_logits_mean_is_uniform(self):
        # empirical candidate-weight mean over 1e5 draws within 3 SE of 1/8
        state = toy_state(seed=7)
        n = 100_000
        acc = np.zeros(8)
        acc2 = np.zeros(8)
        for _ in range(n):
            w = sample_gumbel_softmax(state).weights[(0, (0, 2))]
            acc += w
            acc2 += w * w
        mean = acc / n
        se = np.sqrt((acc2 / n - mean ** 2) / n)
        assert np.all(np.abs(mean - 0.125) < 3 * se)

    def test_fixed_seed_reproduces_sequence(self):
        a = toy_state(seed=3)
        b = toy_state(seed=3)
        for _ in range(5):
            wa = sample_gumbel_softmax(a).weights[(0, (0, 2))]
            wb = sample_gumbel_softmax(b).weights[(0, (0, 2))]
            np.testing.assert_array_equal(wa, wb)

    def test_edge_streams_are_independent(self):
        # adding an edge must not perturb the first edge's draws
        one = toy_state(seed=9)
        seq_one = [sample_gumbel_softmax(one).weights[(0, (0, 2))] for _ in range(3)]
        two = ArchState(logits={(0, (0, 2)): np.zeros(8), (0, (1, 2)): np.zeros(8)},
                        seed=9)
        seq_two = [sample_gumbel_softmax(two).weights[(0, (0, 2))] for _ in range(3)]
        for a, b in zip(seq_one, seq_two):
            np.testing.assert_array_equal(a, b)


class TestDiscreteSampling:
    def test_one_hot_exactness(self):
        state = toy_state(seed=1)
        sample = sample_discrete(state)
        onehot = sample.one_hot((0, (0, 2)), 8)
        assert onehot.sum() == 1.0
        assert set(np.unique(onehot)) <= {0.0, 1.0}

    def test_uniform_sampling_chi_square(self):
        state = toy_state({(0, (0, 2)): np.array([5.0, 0, 0, 0, -3, 0, 0, 0])}, seed=11)
        n = 100_000
        counts = np.zeros(8)
        for _ in range(n):
            counts[sample_discrete(state, uniform=True).selections[(0, (0, 2))]] += 1
        stat = ((counts - n / 8) ** 2 / (n / 8)).sum()
        p = scipy_stats.chi2.sf(stat, df=7)
        assert p > 0.01

    def test_degenerate_logits_concentrate(self):
        logits = np.zeros(8)
        logits[3] = 20.0
        state = toy_state({(0, (0, 2)): logits}, seed=13)
        hits = sum(sample_discrete(state).selections[(0, (0, 2))] == 3
                   for _ in range(10_000))
        assert hits / 10_000 > 0.999


class TestArchGrad:
    def test_unknown_framework_rejected(self):
        with pytest.raises(ValueError, match="framework"):
            arch_grad("enas", {}, None, toy_state())

    def test_single_candidate_edge_gets_zero_gradient(self):
        state = toy_state({(0, (0, 1)): np.zeros(1)})
        sample = ArchSample(selections={(0, (0, 1)): 0})
        g = arch_grad("dsnas", {(0, (0, 1)): 2.5}, sample, state)
        np.testing.assert_array_equal(g[(0, (0, 1))], [0.0])
        relaxed = darts_weights(state)
        g = arch_grad("darts", {(0, (0, 1)): np.array([2.5])}, relaxed, state)
        np.testing.assert_array_equal(g[(0, (0, 1))], [0.0])

    def test_dsnas_score_function_form(self):
        state = toy_state({(0, (0, 2)): np.log(np.array([0.2, 0.3, 0.5]))})
        sample = ArchSample(selections={(0, (0, 2)): 1})
        g = arch_grad("dsnas", {(0, (0, 2)): 2.0}, sample, state)
        expected = (np.array([0.0, 1.0, 0.0]) - np.array([0.2, 0.3, 0.5])) * 2.0
        np.testing.assert_allclose(g[(0, (0, 2))], expected, atol=1e-12)

    def test_softmax_jacobian_rows_sum_to_zero(self):
        state = toy_state({(0, (0, 2)): np.array([0.4, -1.2, 0.7, 0.0])})
        relaxed = darts_weights(state)
        rng = np.random.default_rng(3)
        c = {(0, (0, 2)): rng.normal(size=4)}
        g = arch_grad("darts", c, relaxed, state)
        # gradient of a softmax-through cost is shift-orthogonal
        assert abs(g[(0, (0, 2))].sum()) < 1e-12

    def test_dsnas_unbiased_on_enumerable_toy(self):
        """Score-function estimate of d/dlogit E[cost] on 2 candidates
        against exact enumeration."""
        logits = np.array([0.3, -0.4])
        costs = np.array([1.7, -0.9])
        p = np.exp(logits) / np.exp(logits).sum()
        # exact gradient of sum_k p_k c_k wrt logits
        expected = p * (costs - np.dot(p, costs))

        state = toy_state({(0, (0, 2)): logits.copy()}, seed=21)
        n = 100_000
        acc = np.zeros(2)
        acc2 = np.zeros(2)
        for _ in range(n):
            s = sample_discrete(state)
            k = s.selections[(0, (0, 2))]
            g = arch_grad("dsnas", {(0, (0, 2)): float(costs[k])}, s, state)[(0, (0, 2))]
            acc += g
            acc2 += g * g
        mean = acc / n
        se = np.sqrt((acc2 / n - mean ** 2) / n)
        assert np.all(np.abs(mean - expected) < 3 * se)


class TestDartsEndToEnd:
    def test_darts_gradient_matches_tape_autodiff(self):
        """The analytic softmax-Jacobian-times-cost gradient equals running
        the tape end to end through the softmax to the logits."""
        spec = NetworkSpec(cells=(build_minimal_cell(),), stem_channels=4,
                           num_classes=5, image_size=(6, 6))
        net = Network(spec, seed=2)
        data = synth_dataset(5, (3, 6, 6), 12, 1.0, seed=4)
        x, labels = data.images, data.labels

        rng = np.random.default_rng(8)
        state = ArchState(logits={k: rng.normal(0, 0.4, 8)
                                  for k in spec.sampled_edges()}, seed=0)

        # route 1: end-to-end autodiff through softmax leaves
        from wirelens.estimators import _softmax
        from wirelens.ops import softmax_vec
        leaves = {}

        def builder(key):
            def build(tape):
                leaf = Tensor(state.logits[key].copy(), requires_grad=True)
                leaves[key] = leaf
                return softmax_vec(tape, leaf, 1.0)
            return build

        sel = {key: builder(key) for key in spec.sampled_edges()}
        trace = net.forward(x, sel, capture=True)
        net.loss(trace, labels, backward=True)
        end_to_end = {key: leaves[key].grad.copy() for key in leaves}

        # route 2: constant-weight forward plus the analytic Jacobian form
        relaxed = darts_weights(state)
        trace2 = net.forward(x, relaxed.weights, capture=True)
        net.loss(trace2, labels, backward=True)
        vectors = {key: trace2.edge_weights[key].grad for key in relaxed.weights}
        analytic = arch_grad("darts", vectors, relaxed, state)

        for key in end_to_end:
            denom = max(np.abs(end_to_end[key]).max(), 1e-12)
            assert np.abs(end_to_end[key] - analytic[key]).max() / denom < 1e-6


class TestOptimizers:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = {"w": np.array([1.0, 2.0])}
        SGD(lr=0.5).step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_plain_sgd_unit_lr(self):
        p = {"w": np.array([1.0, 2.0])}
        SGD(lr=1.0).step(p, {"w": np.array([0.25, -1.0])})
        np.testing.assert_array_equal(p["w"], [0.75, 3.0])

    def test_momentum_two_step_hand_oracle(self):
        # lr 0.1, momentum 0.9, grads 1 then 0.5:
        # v1 = 1, p1 = -0.1; v2 = 0.9 + 0.5 = 1.4, p2 = -0.1 - 0.14 = -0.24
        p = {"w": np.array([0.0])}
        opt = SGD(lr=0.1, momentum=0.9)
        opt.step(p, {"w": np.array([1.0])})
        np.testing.assert_allclose(p["w"], [-0.1], atol=1e-15)
        opt.step(p, {"w": np.array([0.5])})
        np.testing.assert_allclose(p["w"], [-0.24], atol=1e-15)

    def test_nan_gradient_aborts_with_name(self):
        p = {"cell0.edge0-2.sep_conv_3x3.conv": np.zeros(3)}
        with pytest.raises(FloatingPointError, match="edge0-2"):
            SGD(lr=0.1).step(p, {"cell0.edge0-2.sep_conv_3x3.conv":
                                 np.array([1.0, np.nan, 0.0])})

    def test_adam_moves_toward_negative_gradient(self):
        p = {"w": np.array([1.0])}
        Adam(lr=0.1).step(p, {"w": np.array([3.0])})
        assert p["w"][0] < 1.0

    def test_update_determinism(self):
        def run():
            p = {"w": np.array([0.3, -0.2])}
            opt = Adam(lr=0.01)
            for t in range(5):
                opt.step(p, {"w": np.array([0.1 * t, -0.05])})
            return p["w"]
        np.testing.assert_array_equal(run(), run())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1),
       st.floats(0.05, 5.0),
       st.lists(st.floats(-4, 4), min_size=2, max_size=8))
def test_relaxed_samples_lie_on_simplex(seed, temperature, logits):
    """Gumbel-softmax draws are simplex-valued for any logits and
    temperature."""
    state = ArchState(logits={(0, (0, 2)): np.array(logits)},
                      temperature=temperature, seed=seed)
    w = sample_gumbel_softmax(state).weights[(0, (0, 2))]
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-10, 10))
def test_logit_shift_invariance(seed, shift):
    """Adding a constant to all logits of an edge changes neither the
    sampling distribution nor the gradient direction."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=5)
    base = ArchState(logits={(0, (0, 2)): logits.copy()}, seed=seed)
    moved = ArchState(logits={(0, (0, 2)): logits + shift}, seed=seed)
    np.testing.assert_allclose(base.probabilities()[(0, (0, 2))],
                               moved.probabilities()[(0, (0, 2))], atol=1e-12)
    c = {(0, (0, 2)): rng.normal(size=5)}
    ga = arch_grad("darts", c, darts_weights(base), base)[(0, (0, 2))]
    gb = arch_grad("darts", c, darts_weights(moved), moved)[(0, (0, 2))]
    np.testing.assert_allclose(ga, gb, atol=1e-10)
