"""Config plumbing, optimizer, training determinism, CSV/meta outputs, CLI."""

import dataclasses
import json
import math

import numpy as np
import pytest

from priocam import cli
from priocam.autodiff import ParamSet
from priocam.errors import ConfigurationError, TrainingError
from priocam.harness import (Adam, ExperimentConfig, build_batch,
                             config_from_dict, config_hash, config_to_dict,
                             delayed_camera_ids, emit_csv, evaluate,
                             latent_shape, load_config, make_record,
                             parse_csv, run_point, save_config, setup_run,
                             side_shape, train, write_meta)
from priocam.scene import SceneConfig


def _tiny(**kw) -> ExperimentConfig:
    base = dict(
        scenario="harness", seeds=(0,),
        scene=SceneConfig(grid_h=8, grid_w=8, ped_min=2, ped_max=4,
                          n_frames=40, n_cameras=2, noise_sigma=0.05,
                          occlusion_rate=0.1, fps=2.0),
        steps=0, batch_size=2, grad_gate=False, log_every=10,
        entropy_hidden=4, priority_hidden=8)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = _tiny(n_delayed=1, lam=0.05, sweep_lambdas=(0.4, 0.2))
        path = tmp_path / "config.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_dict_round_trip_preserves_nested_types(self):
        cfg = _tiny()
        clone = config_from_dict(config_to_dict(cfg))
        assert isinstance(clone.scene, SceneConfig)
        assert isinstance(clone.seeds, tuple)
        assert clone == cfg

    def test_hash_tracks_content(self):
        a, b = _tiny(), _tiny(lam=0.02)
        assert config_hash(a) == config_hash(a)
        assert config_hash(a) != config_hash(b)
        assert len(config_hash(a)) == 16

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            _tiny(seeds=())
        with pytest.raises(ConfigurationError):
            _tiny(n_delayed=3)          # only 2 cameras
        with pytest.raises(ConfigurationError):
            _tiny(lr=0.0)
        with pytest.raises(ConfigurationError):
            _tiny(lam_warmup_steps=-1)
        with pytest.raises(ConfigurationError):
            _tiny(eval_stride=0)

    def test_shape_helpers(self):
        assert latent_shape(8, 8) == (4, 4)
        assert latent_shape(9, 7) == (5, 4)
        assert side_shape(4, 4) == (1, 1)
        assert side_shape(5, 9) == (2, 3)

    def test_delayed_ids_skip_camera_zero(self):
        assert delayed_camera_ids(0, 7) == []
        assert delayed_camera_ids(3, 7) == [1, 2, 3]
        assert delayed_camera_ids(7, 7) == [0, 1, 2, 3, 4, 5, 6]


class TestAdam:
    def test_converges_on_quadratic(self):
        p = ParamSet()
        x = p.add("x", np.array([5.0, -3.0]))
        adam = Adam(p, lr=0.1)
        for _ in range(400):
            p.zero_grad()
            x.grad = 2.0 * x.data
            adam.step()
        assert np.abs(x.data).max() < 1e-3

    def test_first_step_moves_by_lr(self):
        # bias correction makes the very first update exactly lr-sized
        p = ParamSet()
        x = p.add("x", np.array([1.0]))
        adam = Adam(p, lr=0.01)
        x.grad = np.array([123.0])
        adam.step()
        assert x.data[0] == pytest.approx(1.0 - 0.01, rel=1e-9)

    def test_rejects_non_finite_grads(self):
        p = ParamSet()
        x = p.add("x", np.array([1.0]))
        adam = Adam(p, lr=0.01)
        x.grad = np.array([math.inf])
        with pytest.raises(TrainingError):
            adam.step()

    def test_skips_params_without_grads(self):
        p = ParamSet()
        x = p.add("x", np.array([1.0]))
        Adam(p, lr=0.5).step()
        assert x.data[0] == 1.0


class TestTraining:
    def test_zero_steps_returns_init(self):
        res = train(_tiny(), 0)
        assert res.steps_run == 0
        assert res.final is None
        assert res.history == []

    def test_same_seed_is_bit_identical(self):
        cfg = _tiny(steps=15)
        a = train(cfg, 3)
        b = train(cfg, 3)
        for name in a.ctx.models.params.names():
            np.testing.assert_array_equal(a.ctx.models.params[name].data,
                                          b.ctx.models.params[name].data)
        assert a.final.total == b.final.total

    def test_different_seeds_differ(self):
        cfg = _tiny(steps=5)
        a, b = train(cfg, 0), train(cfg, 1)
        assert a.final.total != b.final.total

    def test_loss_decreases(self):
        res = train(_tiny(steps=60), 2)
        assert res.history[-1]["total"] < res.history[0]["total"]

    def test_warmup_scales_rate_penalty_in(self):
        hot = train(_tiny(steps=40, lam=0.5, log_every=40), 4)
        warm = train(_tiny(steps=40, lam=0.5, lam_warmup_steps=4000,
                           log_every=40), 4)
        assert hot.final.lam == 0.5
        # last step is 39 (0-indexed), so the ramp applied 40/4000 of lam
        assert warm.final.lam == pytest.approx(0.5 * 40 / 4000, rel=1e-12)

    def test_warmup_reaches_full_penalty_after_ramp(self):
        res = train(_tiny(steps=12, lam=0.5, lam_warmup_steps=6,
                          log_every=12), 4)
        assert res.final.lam == 0.5

    def test_recorded_gate_error_is_small(self):
        res = train(_tiny(steps=5, grad_gate=True, grad_gate_samples=8), 2)
        assert res.grad_gate_error is not None
        assert res.grad_gate_error < 1e-3


class TestEvaluate:
    def test_eval_is_deterministic(self):
        cfg = _tiny(steps=10)
        res = train(cfg, 1)
        a, b = evaluate(res.ctx), evaluate(res.ctx)
        assert a.moda == b.moda
        assert a.total_bits == b.total_bits
        np.testing.assert_array_equal(a.bits_per_camera, b.bits_per_camera)

    def test_bits_are_positive_and_accounted(self):
        cfg = _tiny(steps=0)
        res = train(cfg, 0)
        ev = evaluate(res.ctx)
        assert ev.n_frames > 0
        assert ev.total_bits >= 2 * 40 * ev.n_frames  # two flushes per camera
        assert ev.bits_per_camera.shape == (2,)
        total_per_frame = ev.bits_per_camera.sum()
        assert total_per_frame * ev.n_frames == pytest.approx(ev.total_bits,
                                                              rel=1e-9)

    def test_weights_used_for_fusion_sum_to_one(self):
        res = train(_tiny(steps=0), 5)
        ev = evaluate(res.ctx)
        assert ev.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert not ev.degenerate


class TestRecordsAndCsv:
    def test_record_layout(self):
        cfg = _tiny(steps=2)
        rec = run_point(cfg, 0, "learned", "lambda", 0.01)
        assert rec["schema_version"] == 1
        assert rec["n_cameras"] == 2
        for key in ("moda", "total_bits", "bits_per_frame", "l1", "l2", "l3",
                    "loss_total", "wall_time_s", "bits_cam0", "weight_cam1",
                    "d_norm_cam0"):
            assert key in rec, key
        assert rec["sweep_axis"] == "lambda"
        assert rec["weight_mode"] == "learned"

    def test_csv_round_trip_types(self, tmp_path):
        cfg = _tiny(steps=2)
        rec = run_point(cfg, 0, "equal", "single", 0.0)
        path = tmp_path / "out.csv"
        emit_csv([rec], path)
        back = parse_csv(path)
        assert len(back) == 1
        got = back[0]
        assert got["seed"] == rec["seed"]
        assert got["moda"] == pytest.approx(rec["moda"], rel=1e-8)
        assert got["weight_mode"] == "equal"

    def test_csv_rejects_ragged_records(self, tmp_path):
        with pytest.raises(ConfigurationError):
            emit_csv([{"a": 1}, {"a": 1, "b": 2}], tmp_path / "bad.csv")

    def test_meta_sidecar(self, tmp_path):
        cfg = _tiny()
        path = tmp_path / "runs.csv"
        emit_csv([{"a": 1.0}], path)
        write_meta(path, cfg, "unit-test", 1)
        doc = json.loads((tmp_path / "runs.csv.meta.json").read_text())
        assert doc["config_hash"] == config_hash(cfg)
        assert doc["command"] == "unit-test"
        assert doc["n_records"] == 1

    def test_make_record_flat_scalars_only(self):
        cfg = _tiny(steps=1)
        res = train(cfg, 0)
        ev = evaluate(res.ctx)
        rec = make_record(cfg, 0, "learned", "single", 0.0, res, ev, 1.25)
        for key, val in rec.items():
            assert isinstance(val, (int, float, str, bool)), (key, type(val))


class TestCli:
    def test_train_command_writes_outputs(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        save_config(_tiny(steps=2), cfg_path)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", str(cfg_path), "--seed", "1",
                       "--out", str(out)])
        assert rc == 0
        assert (out / "train.csv").exists()
        assert (out / "train.csv.meta.json").exists()
        assert (out / "config.json").exists()
        assert "moda" in capsys.readouterr().out

    def test_train_rejects_unknown_weight_mode(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        save_config(_tiny(steps=1), cfg_path)
        with pytest.raises(SystemExit):
            cli.main(["train", "--config", str(cfg_path),
                      "--weight-mode", "both"])

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["--version"])
        assert e.value.code == 0

    def test_no_command_is_an_error(self):
        with pytest.raises(SystemExit):
            cli.main([])
