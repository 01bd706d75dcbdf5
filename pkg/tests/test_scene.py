"""World generation, camera views, fusion shapes, and the detection metric."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priocam import autodiff as ad
from priocam.autodiff import ParamSet, Tensor
from priocam.errors import ConfigurationError, DomainError, ShapeError
from priocam.scene import (Camera, ModaResult, SceneConfig, World,
                           encode_view, fuse_and_decode, fuse_logits,
                           generate_world, init_encoder, init_fusion,
                           make_cameras, moda, moda_sequence, observe)


def _small(**kw) -> SceneConfig:
    base = dict(grid_h=8, grid_w=8, ped_min=2, ped_max=4, n_frames=30,
                n_cameras=3, noise_sigma=0.05, occlusion_rate=0.1, fps=2.0)
    base.update(kw)
    return SceneConfig(**base)


class TestConfig:
    def test_rejects_bad_bounds(self):
        with pytest.raises(ConfigurationError):
            _small(grid_h=0)
        with pytest.raises(ConfigurationError):
            _small(ped_min=5, ped_max=2)
        with pytest.raises(ConfigurationError):
            _small(ped_max=200)
        with pytest.raises(ConfigurationError):
            _small(occlusion_rate=1.5)
        with pytest.raises(ConfigurationError):
            _small(fps=0.0)


class TestWorld:
    def test_deterministic(self):
        cfg = _small()
        a, b = generate_world(11, cfg), generate_world(11, cfg)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.occupancy, b.occupancy)

    def test_pedestrian_count_within_bounds(self):
        for seed in range(6):
            world = generate_world(seed, _small())
            assert 2 <= world.n_pedestrians <= 4

    def test_no_two_pedestrians_share_a_cell(self):
        world = generate_world(5, _small(ped_min=6, ped_max=6, n_frames=60))
        for t in range(world.config.n_frames):
            cells = {tuple(p) for p in world.positions[t]}
            assert len(cells) == world.n_pedestrians

    def test_moves_at_most_one_cell_in_cardinal_directions(self):
        world = generate_world(7, _small(n_frames=50))
        deltas = np.abs(np.diff(world.positions, axis=0)).sum(axis=2)
        assert deltas.max() <= 1

    def test_positions_in_bounds(self):
        world = generate_world(9, _small())
        assert world.positions.min() >= 0
        assert world.positions[:, :, 0].max() < 8
        assert world.positions[:, :, 1].max() < 8

    def test_occupancy_matches_positions(self):
        world = generate_world(3, _small())
        for t in (0, 10, 29):
            occ = np.zeros((8, 8))
            occ[world.positions[t, :, 0], world.positions[t, :, 1]] = 1.0
            np.testing.assert_array_equal(world.frame(t), occ)

    def test_json_round_trip(self):
        world = generate_world(13, _small())
        clone = World.from_json(world.to_json())
        np.testing.assert_array_equal(clone.positions, world.positions)
        np.testing.assert_array_equal(clone.occupancy, world.occupancy)
        assert clone.config == world.config
        assert clone.seed == world.seed

    def test_json_schema_checked(self):
        with pytest.raises(ConfigurationError):
            World.from_json('{"schema": "something-else"}')


class TestCameras:
    def test_union_always_covers_grid(self):
        for seed in range(8):
            cfg = _small(n_cameras=int(np.random.default_rng(seed).integers(1, 9)))
            cams = make_cameras(np.random.default_rng(seed), cfg)
            union = np.zeros((cfg.grid_h, cfg.grid_w))
            for cam in cams:
                union = np.maximum(union, cam.mask)
            assert union.min() == 1.0

    def test_camera_count_and_ids(self):
        cams = make_cameras(np.random.default_rng(0), _small(n_cameras=5))
        assert [c.camera_id for c in cams] == [0, 1, 2, 3, 4]

    def test_masks_are_binary_with_positive_coverage(self):
        cams = make_cameras(np.random.default_rng(2), _small())
        for cam in cams:
            assert set(np.unique(cam.mask)) <= {0.0, 1.0}
            assert cam.coverage >= 1.0

    def test_full_fov_mode_gives_every_camera_the_grid(self):
        cfg = _small(n_cameras=4, fov_mode="full")
        cams = make_cameras(np.random.default_rng(3), cfg)
        assert len(cams) == 4
        for cam in cams:
            assert cam.mask.shape == (cfg.grid_h, cfg.grid_w)
            assert cam.mask.min() == 1.0

    def test_unknown_fov_mode_rejected(self):
        with pytest.raises(ConfigurationError, match="fov_mode"):
            _small(fov_mode="cone")


class TestObserve:
    def _cam(self) -> Camera:
        mask = np.zeros((8, 8))
        mask[2:6, :] = 1.0
        return Camera(camera_id=0, mask=mask)

    def test_clean_view_is_masked_occupancy(self):
        occ = np.zeros((8, 8))
        occ[3, 4] = 1.0
        occ[0, 0] = 1.0                       # outside the FoV
        view = observe(occ, self._cam(), np.random.default_rng(0),
                       noise_sigma=0.0, occlusion_rate=0.0)
        assert view.shape == (2, 8, 8)
        np.testing.assert_array_equal(view[0], occ * self._cam().mask)
        np.testing.assert_array_equal(view[1], self._cam().mask)

    def test_signal_stays_inside_fov(self):
        occ = np.ones((8, 8))
        view = observe(occ, self._cam(), np.random.default_rng(1),
                       noise_sigma=0.3, occlusion_rate=0.2)
        np.testing.assert_array_equal(view[0][self._cam().mask == 0], 0.0)

    def test_full_occlusion_blanks_pedestrians(self):
        occ = np.ones((8, 8))
        view = observe(occ, self._cam(), np.random.default_rng(2),
                       noise_sigma=0.0, occlusion_rate=1.0)
        np.testing.assert_array_equal(view[0], 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            observe(np.zeros((4, 4)), self._cam(), np.random.default_rng(0),
                    0.0, 0.0)


class TestFusion:
    def _params(self, rng) -> ParamSet:
        p = init_fusion(rng)
        p.update(init_encoder(rng, "enc0"))
        p.update(init_encoder(rng, "enc1"))
        return p

    def test_latent_halves_each_spatial_dim(self):
        rng = np.random.default_rng(0)
        p = self._params(rng)
        for h, w in ((8, 8), (7, 9), (12, 12)):
            z = encode_view(np.zeros((1, 2, h, w)), p, "enc0")
            assert z.shape == (1, 1, -(-h // 2), -(-w // 2))

    def test_logits_match_grid(self):
        rng = np.random.default_rng(1)
        p = self._params(rng)
        latents = [Tensor(rng.normal(size=(2, 1, 4, 4))) for _ in range(2)]
        logits = fuse_logits(latents, Tensor(np.array([0.7, 0.3])), p, 8, 8)
        assert logits.shape == (2, 1, 8, 8)
        probs = fuse_and_decode(latents, Tensor(np.array([0.7, 0.3])), p, 8, 8)
        assert (probs.data > 0).all() and (probs.data < 1).all()

    def test_zero_weight_camera_is_invisible(self):
        rng = np.random.default_rng(2)
        p = self._params(rng)
        za = Tensor(rng.normal(size=(1, 1, 4, 4)))
        zb = Tensor(rng.normal(size=(1, 1, 4, 4)))
        zc = Tensor(rng.normal(size=(1, 1, 4, 4)))
        one = fuse_logits([za, zb], Tensor(np.array([1.0, 0.0])), p, 8, 8)
        other = fuse_logits([za, zc], Tensor(np.array([1.0, 0.0])), p, 8, 8)
        np.testing.assert_allclose(one.data, other.data, atol=1e-12)

    def test_weight_count_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        p = self._params(rng)
        with pytest.raises(ShapeError):
            fuse_logits([Tensor(np.zeros((1, 1, 4, 4)))],
                        Tensor(np.array([0.5, 0.5])), p, 8, 8)

    def test_empty_latent_list_rejected(self):
        with pytest.raises(DomainError):
            fuse_logits([], Tensor(np.array([])),
                        self._params(np.random.default_rng(4)), 8, 8)

    def test_gradient_reaches_every_camera_latent(self):
        rng = np.random.default_rng(5)
        p = self._params(rng)
        p2 = ParamSet()
        za = p2.add("za", rng.normal(size=(1, 1, 4, 4)))
        zb = p2.add("zb", rng.normal(size=(1, 1, 4, 4)))
        out = ad.tsum(fuse_logits([za, zb], Tensor(np.array([0.6, 0.4])), p, 8, 8))
        out.backward()
        assert za.grad is not None and np.abs(za.grad).max() > 0
        assert zb.grad is not None and np.abs(zb.grad).max() > 0


class TestModa:
    def _probs(self, hits, h=8, w=8):
        p = np.full((h, w), 0.1)
        for r, c in hits:
            p[r, c] = 0.9
        return p

    def test_perfect_detection(self):
        gt = np.array([[1, 1], [4, 5], [7, 0]])
        res = moda(self._probs(gt), gt)
        assert res.score == 1.0
        assert res.false_negatives == 0 and res.false_positives == 0
        assert res.n_ground_truth == 3 and not res.degenerate

    def test_miss_and_false_alarm(self):
        # 4 truths, 3 found, 1 spurious detection far away: 1 - 2/4
        gt = np.array([[0, 0], [2, 2], [4, 4], [6, 6]])
        res = moda(self._probs([(0, 0), (2, 2), (4, 4), (0, 7)]), gt)
        assert res.score == pytest.approx(0.5, abs=1e-15)
        assert res.false_negatives == 1 and res.false_positives == 1

    def test_all_missed_is_zero(self):
        gt = np.array([[1, 1], [5, 5]])
        res = moda(self._probs([]), gt)
        assert res.score == 0.0
        assert res.false_negatives == 2

    def test_neighbor_cell_matches_within_radius(self):
        gt = np.array([[3, 3]])
        assert moda(self._probs([(3, 4)]), gt).score == 1.0
        # diagonal is sqrt(2) > 1, so it is both a miss and a false alarm
        assert moda(self._probs([(4, 4)]), gt).score == -1.0

    def test_one_detection_cannot_match_two_truths(self):
        gt = np.array([[3, 3], [3, 5]])
        res = moda(self._probs([(3, 4)]), gt)
        assert res.false_negatives == 1 and res.false_positives == 0
        assert res.score == pytest.approx(0.5, abs=1e-15)

    def test_empty_ground_truth_frames(self):
        empty = np.zeros((0, 2))
        assert moda(self._probs([]), empty).score == 1.0
        res = moda(self._probs([(1, 1), (2, 6)]), empty)
        assert res.score == -1.0
        assert res.degenerate

    def test_threshold_validated(self):
        with pytest.raises(DomainError):
            moda(self._probs([]), np.array([[1, 1]]), threshold=1.0)

    def test_sequence_pools_errors_not_scores(self):
        frames = [
            ModaResult(score=1.0, false_negatives=0, false_positives=0,
                       n_ground_truth=3),
            ModaResult(score=0.0, false_negatives=2, false_positives=1,
                       n_ground_truth=3),
        ]
        # pooled: 1 - (2+1)/6, not the mean of (1.0, 0.0)
        assert moda_sequence(frames) == pytest.approx(0.5, abs=1e-15)

    def test_sequence_of_empty_frames(self):
        frames = [ModaResult(score=1.0, false_negatives=0, false_positives=0,
                             n_ground_truth=0, degenerate=True)]
        assert moda_sequence(frames) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_score_never_exceeds_one(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.random((6, 6))
        n = int(rng.integers(0, 5))
        cells = rng.choice(36, size=n, replace=False)
        gt = np.stack([cells // 6, cells % 6], axis=1) if n else np.zeros((0, 2))
        res = moda(probs, gt)
        assert res.score <= 1.0
        if res.n_ground_truth:
            assert res.false_negatives + res.false_positives >= 0
            assert res.score == pytest.approx(
                1.0 - (res.false_negatives + res.false_positives)
                / res.n_ground_truth, rel=1e-12)
