"""Loss terms against hand oracles, plus assembly and isolation checks."""

import dataclasses
import math

import numpy as np
import pytest

from priocam import autodiff as ad
from priocam.autodiff import ParamSet, Tensor
from priocam.entropy_model import EntropyModel
from priocam.errors import (ConfigurationError, DomainError, ShapeError,
                            TrainingError)
from priocam.harness import ExperimentConfig, build_batch, setup_run
from priocam.losses import (GateConfig, distortion_term, empirical_entropy,
                            loss_L2_camera, loss_L3, rate_term, total_loss)
from priocam.scene import SceneConfig


def _toy_ctx(seed=0, weight_mode="learned"):
    cfg = ExperimentConfig(
        scenario="losses", seeds=(0,),
        scene=SceneConfig(grid_h=8, grid_w=8, ped_min=2, ped_max=4,
                          n_frames=40, n_cameras=2, noise_sigma=0.05,
                          occlusion_rate=0.1, fps=2.0),
        steps=0, batch_size=2, grad_gate=False,
        entropy_hidden=4, priority_hidden=8)
    return setup_run(cfg, seed, weight_mode)


class TestDistortion:
    def test_sign_and_scale(self):
        out = distortion_term(Tensor(0.5), Tensor(-2.0))
        assert float(out.data) == pytest.approx(1.0, abs=1e-15)

    def test_rejects_weight_outside_unit_interval(self):
        for w in (0.0, -0.1, 1.5):
            with pytest.raises(DomainError):
                distortion_term(Tensor(w), Tensor(-1.0))

    def test_rejects_non_finite_likelihood(self):
        with pytest.raises(TrainingError):
            distortion_term(Tensor(0.5), Tensor(float("nan")))


class TestRateTerm:
    def test_priority_factor(self):
        out = rate_term(Tensor(0.2), Tensor(0.6), Tensor(1.0), r_max_nats=1e9)
        assert float(out.data) == pytest.approx(math.exp(0.4), rel=1e-14)

    def test_top_priority_camera_pays_face_value(self):
        out = rate_term(Tensor(0.6), Tensor(0.6), Tensor(3.25), r_max_nats=1e9)
        assert float(out.data) == pytest.approx(3.25, rel=1e-15)

    def test_cap_binds_and_blocks_gradient(self):
        p = ParamSet()
        w = p.add("w", 0.2)
        out = rate_term(w, Tensor(0.6), Tensor(100.0), r_max_nats=5.0)
        assert float(out.data) == 5.0
        out.backward()
        assert w.grad is None or np.allclose(w.grad, 0.0)

    def test_open_branch_passes_gradient(self):
        p = ParamSet()
        w = p.add("w", 0.2)
        out = rate_term(w, Tensor(0.6), Tensor(1.0), r_max_nats=5.0)
        out.backward()
        # d/dw [e^(w0-w)] = -e^(w0-w)
        assert w.grad == pytest.approx(-math.exp(0.4), rel=1e-12)

    def test_w0_below_weight_rejected(self):
        with pytest.raises(DomainError):
            rate_term(Tensor(0.6), Tensor(0.2), Tensor(1.0), r_max_nats=1.0)

    def test_negative_rate_rejected(self):
        with pytest.raises(DomainError):
            rate_term(Tensor(0.2), Tensor(0.6), Tensor(-1.0), r_max_nats=1.0)


class TestGateLoss:
    def test_worked_example(self):
        # on-time: (0.6-0.5)^2 = 0.01; late: 0.4^2 = 0.16; total 0.17
        out = loss_L3(Tensor(np.array([0.6, 0.4])), np.array([0.1, 0.9]),
                      GateConfig(epsilon=0.5, w_target=0.5))
        assert float(out.data) == pytest.approx(0.17, abs=1e-12)

    def test_boundary_delay_contributes_nothing(self):
        out = loss_L3(Tensor(np.array([0.3, 0.7])), np.array([0.5, 0.5]),
                      GateConfig(epsilon=0.5, w_target=0.9))
        assert float(out.data) == 0.0

    def test_perfect_assignment_is_zero(self):
        out = loss_L3(Tensor(np.array([0.5, 0.5, 0.0])),
                      np.array([0.0, 0.1, 1.0]),
                      GateConfig(epsilon=0.5, w_target=0.5))
        assert float(out.data) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            loss_L3(Tensor(np.array([0.5])), np.array([0.1, 0.9]),
                    GateConfig())

    def test_gate_config_validation(self):
        with pytest.raises(ConfigurationError):
            GateConfig(epsilon=0.0)
        with pytest.raises(ConfigurationError):
            GateConfig(w_target=1.5)


class TestEmpiricalEntropy:
    def test_balanced_binary_split(self):
        context = np.zeros((4, 2, 1, 1))
        target = np.array([0.0, 0.0, 1.0, 1.0]).reshape(4, 1, 1, 1)
        assert empirical_entropy(context, target) == pytest.approx(
            math.log(2.0), rel=1e-12)

    def test_constant_targets_have_zero_entropy(self):
        context = np.zeros((4, 2, 1, 1))
        target = np.ones((4, 1, 1, 1))
        assert empirical_entropy(context, target) == 0.0

    def test_distinct_contexts_form_singleton_groups(self):
        context = np.arange(8.0).reshape(4, 2, 1, 1)
        target = np.array([0.0, 1.0, 0.0, 1.0]).reshape(4, 1, 1, 1)
        assert empirical_entropy(context, target) == 0.0

    def test_elements_are_independent_streams(self):
        context = np.zeros((2, 2, 1, 2))
        target = np.array([[0.0, 5.0], [1.0, 5.0]]).reshape(2, 1, 1, 2)
        # first element splits 50/50, second is constant
        assert empirical_entropy(context, target) == pytest.approx(
            math.log(2.0), rel=1e-12)


class TestTemporalFit:
    def _confident_model(self) -> EntropyModel:
        model = EntropyModel.init(np.random.default_rng(0), tau=2, hidden=4,
                                  prefix="em")
        pf = model.prefix
        for name in (f"{pf}/tau/mu_w", f"{pf}/tau/mu_b", f"{pf}/tau/sigma_w"):
            model.params[name].data[...] = 0.0
        model.params[f"{pf}/tau/sigma_b"].data[...] = -40.0
        return model

    def test_exact_fit_reaches_zero(self):
        # model certain of 0, data constant 0: CE and entropy both vanish
        model = self._confident_model()
        context = np.zeros((3, 2, 2, 2))
        zq = np.zeros((3, 1, 2, 2), dtype=np.int64)
        l2, ce = loss_L2_camera(context, zq, model)
        assert ce == pytest.approx(0.0, abs=1e-9)
        assert float(l2.data) == pytest.approx(0.0, abs=1e-9)

    def test_fit_gap_is_nonnegative_for_shared_context(self):
        # CE >= empirical entropy whenever contexts coincide (Gibbs)
        rng = np.random.default_rng(3)
        model = EntropyModel.init(rng, tau=2, hidden=4, prefix="em")
        for _ in range(20):
            context = np.zeros((6, 2, 2, 2))
            zq = rng.integers(-2, 3, size=(6, 1, 2, 2))
            l2, _ = loss_L2_camera(context, zq, model)
            assert float(l2.data) >= -1e-9


class TestTotalLoss:
    def test_breakdown_identity(self):
        ctx = _toy_ctx()
        batch = build_batch(ctx, 2)
        total, bd = total_loss(batch, ctx.models, ctx.loss_cfg)
        assert float(total.data) == pytest.approx(
            bd.l1 + ctx.loss_cfg.alpha2 * bd.l2 + ctx.loss_cfg.alpha3 * bd.l3,
            rel=1e-12)
        assert bd.total == pytest.approx(float(total.data), rel=1e-15)

    def test_rate_bookkeeping_consistent(self):
        ctx = _toy_ctx(seed=1)
        batch = build_batch(ctx, 3)
        _, bd = total_loss(batch, ctx.models, ctx.loss_cfg)
        factors = np.exp(bd.w0 - bd.weights)
        np.testing.assert_allclose(bd.rate_raw_per_camera,
                                   bd.rate_base_per_camera * factors,
                                   rtol=1e-12)
        np.testing.assert_allclose(
            bd.rate_clipped_per_camera,
            np.minimum(bd.rate_raw_per_camera, bd.r_max_nats), rtol=1e-12)
        assert (bd.rate_base_per_camera >= 0).all()

    def test_weights_sum_to_one(self):
        ctx = _toy_ctx(seed=2)
        batch = build_batch(ctx, 2)
        _, bd = total_loss(batch, ctx.models, ctx.loss_cfg)
        assert bd.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert bd.w0 == pytest.approx(bd.weights.max(), abs=1e-12)

    def test_equal_mode_fixes_weights(self):
        ctx = _toy_ctx(seed=2, weight_mode="equal")
        batch = build_batch(ctx, 2)
        _, bd = total_loss(batch, ctx.models, ctx.loss_cfg)
        np.testing.assert_allclose(bd.weights, 0.5, atol=1e-15)

    def test_temporal_term_touches_only_temporal_params(self):
        ctx = _toy_ctx(seed=4)
        batch = build_batch(ctx, 2)

        def grads(alpha2: float) -> dict[str, np.ndarray]:
            cfg = dataclasses.replace(ctx.loss_cfg, alpha2=alpha2)
            total, _ = total_loss(batch, ctx.models, cfg)
            ctx.models.params.zero_grad()
            total.backward()
            return {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                    for n, t in ctx.models.params.items()}

        g0, g5 = grads(0.0), grads(5.0)
        touched = [n for n in g0 if not np.allclose(g0[n], g5[n], atol=1e-14)]
        assert touched, "alpha2 changed nothing; temporal term is dead"
        for name in touched:
            assert "/tau/" in name, f"temporal loss leaked into {name}"

    def test_deterministic_forward(self):
        ctx = _toy_ctx(seed=5)
        batch = build_batch(ctx, 2)
        a, _ = total_loss(batch, ctx.models, ctx.loss_cfg)
        b, _ = total_loss(batch, ctx.models, ctx.loss_cfg)
        assert float(a.data) == float(b.data)

    def test_camera_model_count_mismatch_rejected(self):
        ctx = _toy_ctx(seed=6)
        batch = build_batch(ctx, 2)
        batch.cameras.pop()
        with pytest.raises(ShapeError):
            total_loss(batch, ctx.models, ctx.loss_cfg)

    def test_empty_camera_list_rejected(self):
        ctx = _toy_ctx(seed=6)
        batch = build_batch(ctx, 2)
        batch.cameras.clear()
        with pytest.raises(DomainError):
            total_loss(batch, ctx.models, ctx.loss_cfg)
