"""Priority MLP, softmax weighting, and the shared anchor weight."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priocam import autodiff as ad
from priocam import priority as prio
from priocam.autodiff import ParamSet, Tensor
from priocam.errors import ConfigurationError, TrainingError


def _hand_params() -> ParamSet:
    ps = ParamSet()
    ps.add("priority/w1", [[0.5, -1.0], [0.25, 0.75]])
    ps.add("priority/b1", [0.1, -0.2])
    ps.add("priority/w2", [[1.5, -0.5]])
    ps.add("priority/b2", [0.2])
    return ps


class TestScore:
    def test_hand_computed_forward(self):
        # h = relu([0.5*0.3 - 1.0*0.6 + 0.1, 0.25*0.3 + 0.75*0.6 - 0.2])
        #   = [0, 0.325]; score = 1.5*0 - 0.5*0.325 + 0.2 = 0.0375
        s = prio.priority_score(0.3, 0.6, _hand_params(), "priority")
        assert s.data.shape == (1,)
        assert s.item() == pytest.approx(0.0375, abs=1e-15)

    def test_inputs_clamped_to_unit_interval(self):
        ps = _hand_params()
        a = prio.priority_score(-3.0, 1.7, ps, "priority")
        b = prio.priority_score(0.0, 1.0, ps, "priority")
        assert a.item() == b.item()

    def test_nonfinite_parameters_rejected(self):
        ps = _hand_params()
        ps["priority/w1"].data[0, 0] = np.nan
        with pytest.raises(TrainingError):
            prio.priority_score(0.5, 0.5, ps, "priority")


class TestNormalizeCoverage:
    def test_midpoint(self):
        assert prio.normalize_coverage(30.0, 10.0, 50.0) == pytest.approx(0.5)

    def test_clamps_out_of_band(self):
        assert prio.normalize_coverage(5.0, 10.0, 50.0) == 0.0
        assert prio.normalize_coverage(99.0, 10.0, 50.0) == 1.0

    def test_rejects_degenerate_band(self):
        with pytest.raises(ConfigurationError):
            prio.normalize_coverage(1.0, 5.0, 5.0)


class TestWeights:
    def test_weights_form_distribution(self):
        rng = np.random.default_rng(31)
        theta = prio.init_theta_m(rng)
        inputs = [(0.1, 0.9), (0.5, 0.5), (0.9, 0.1), (0.0, 1.0)]
        state = prio.evaluate_priorities(inputs, theta)
        assert state.weights.shape == (4,)
        assert state.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert (state.weights > 0).all()

    def test_w0_is_max_weight(self):
        rng = np.random.default_rng(32)
        theta = prio.init_theta_m(rng)
        state = prio.evaluate_priorities([(0.2, 0.3), (0.8, 0.6)], theta)
        assert state.w0 == pytest.approx(state.weights.max(), abs=1e-15)

    def test_rate_discount_factors_at_least_one(self):
        # exp(w0 - w_k) >= 1 whenever w0 is the running max
        rng = np.random.default_rng(33)
        theta = prio.init_theta_m(rng)
        inputs = [(x / 7.0, 1.0 - x / 7.0) for x in range(7)]
        state = prio.evaluate_priorities(inputs, theta)
        factors = np.exp(state.w0 - state.weights)
        assert (factors >= 1.0 - 1e-12).all()

    def test_const_anchor_mode(self):
        rng = np.random.default_rng(34)
        theta = prio.init_theta_m(rng)
        state = prio.evaluate_priorities([(0.2, 0.3), (0.8, 0.6)], theta,
                                         w0_mode="const", w0_const=1.0)
        assert state.w0 == 1.0

    def test_unknown_anchor_mode_rejected(self):
        p = Tensor(np.array([0.1, 0.2]))
        with pytest.raises(ConfigurationError):
            prio.compute_weights(p, w0_mode="median")

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(35)
        theta = prio.init_theta_m(rng)
        inputs = [(0.12, 0.7), (0.55, 0.2), (0.98, 0.4)]
        base = prio.evaluate_priorities(inputs, theta).weights
        perm = [2, 0, 1]
        shuffled = prio.evaluate_priorities([inputs[i] for i in perm],
                                            theta).weights
        np.testing.assert_allclose(shuffled, base[perm], atol=1e-12)

    def test_single_camera_gets_weight_one(self):
        rng = np.random.default_rng(36)
        theta = prio.init_theta_m(rng)
        state = prio.evaluate_priorities([(0.3, 0.4)], theta)
        assert state.weights.shape == (1,)
        assert state.weights[0] == pytest.approx(1.0, abs=1e-12)


class TestGradients:
    def test_weights_differentiable_through_scores(self):
        rng = np.random.default_rng(37)
        theta = prio.init_theta_m(rng)

        def f():
            p = prio.score_vector([(0.2, 0.9), (0.7, 0.3), (0.5, 0.5)], theta)
            w, w0 = prio.compute_weights(p)
            return ad.add(ad.tsum(ad.square(w)), ad.mul(w0, 0.5))

        assert ad.grad_check(f, theta, step=1e-5) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(min_value=0, max_value=1),
                          st.floats(min_value=0, max_value=1)),
                min_size=1, max_size=8),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_weights_sum_to_one_for_any_inputs(inputs, seed):
    theta = prio.init_theta_m(np.random.default_rng(seed))
    state = prio.evaluate_priorities(inputs, theta)
    assert state.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert state.w0 >= state.weights.max() - 1e-12
