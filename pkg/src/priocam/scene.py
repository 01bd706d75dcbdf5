"""Synthetic multi-view world, camera observations, fusion decoder, MODA.

The world is a small occupancy grid with pedestrians taking at most
one 4-neighborhood step per frame (never sharing a cell), so latents
carry temporal correlation for the entropy models to exploit. Cameras
see the grid through rectangular field-of-view masks whose union is
guaranteed to cover the grid; observations are masked, occluded, and
noisy. A shared fusion head turns priority-weighted per-camera latents
into per-cell occupancy probabilities, scored by MODA.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigurationError, DomainError, ShapeError

ENC_HIDDEN = 4
ALIGN_CHANNELS = 4
FUSE_HIDDEN = 8


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    grid_h: int = 16
    grid_w: int = 16
    ped_min: int = 5
    ped_max: int = 15
    n_frames: int = 400
    n_cameras: int = 7
    noise_sigma: float = 0.05
    occlusion_rate: float = 0.1
    fps: float = 2.0              # frame-rate semantics for staleness lags
    fov_mode: str = "bands"       # "bands": complementary rows; "full": overlap

    def __post_init__(self):
        if self.fov_mode not in ("bands", "full"):
            raise ConfigurationError(
                f"fov_mode must be 'bands' or 'full', got {self.fov_mode!r}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigurationError("grid must be at least 1x1")
        if not (0 <= self.ped_min <= self.ped_max):
            raise ConfigurationError(
                f"need 0 <= ped_min <= ped_max, got [{self.ped_min}, {self.ped_max}]")
        if self.ped_max > self.grid_h * self.grid_w:
            raise ConfigurationError(
                f"{self.ped_max} pedestrians cannot fit {self.grid_h}x{self.grid_w} cells")
        if self.n_frames < 1:
            raise ConfigurationError("need at least one frame")
        if self.n_cameras < 1:
            raise ConfigurationError("need at least one camera")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise ConfigurationError("occlusion_rate must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.fps <= 0.0:
            raise ConfigurationError("fps must be positive")


@dataclass(frozen=True)
class World:
    """A full generated sequence: occupancy grids plus pedestrian tracks."""

    config: SceneConfig
    seed: int
    occupancy: np.ndarray          # (T, H, W) float 0/1
    positions: np.ndarray          # (T, n_ped, 2) int row/col

    @property
    def n_pedestrians(self) -> int:
        return self.positions.shape[1]

    def frame(self, t: int) -> np.ndarray:
        return self.occupancy[t]

    def to_json(self) -> str:
        return json.dumps({
            "schema": "priocam-world-v1",
            "seed": self.seed,
            "config": {
                "grid_h": self.config.grid_h, "grid_w": self.config.grid_w,
                "ped_min": self.config.ped_min, "ped_max": self.config.ped_max,
                "n_frames": self.config.n_frames, "n_cameras": self.config.n_cameras,
                "noise_sigma": self.config.noise_sigma,
                "occlusion_rate": self.config.occlusion_rate, "fps": self.config.fps,
            },
            "positions": self.positions.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "World":
        doc = json.loads(text)
        if doc.get("schema") != "priocam-world-v1":
            raise ConfigurationError(f"unknown world schema {doc.get('schema')!r}")
        config = SceneConfig(**doc["config"])
        positions = np.asarray(doc["positions"], dtype=np.int64)
        if positions.size == 0:
            positions = positions.reshape(config.n_frames, 0, 2)
        occupancy = _positions_to_occupancy(positions, config.grid_h, config.grid_w)
        return cls(config=config, seed=doc["seed"], occupancy=occupancy,
                   positions=positions)


def _positions_to_occupancy(positions: np.ndarray, h: int, w: int) -> np.ndarray:
    t, n, _ = positions.shape
    occ = np.zeros((t, h, w))
    for i in range(t):
        occ[i, positions[i, :, 0], positions[i, :, 1]] = 1.0
    return occ


_STEPS = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)])


def generate_world(seed: int, config: SceneConfig) -> World:
    """Deterministic pedestrian sequence: <=1-cell moves, no co-location."""
    rng = np.random.default_rng(seed)
    h, w = config.grid_h, config.grid_w
    n_ped = int(rng.integers(config.ped_min, config.ped_max + 1))
    start = rng.choice(h * w, size=n_ped, replace=False)
    pos = np.stack([start // w, start % w], axis=1).astype(np.int64)

    positions = np.empty((config.n_frames, n_ped, 2), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    occupied[pos[:, 0], pos[:, 1]] = True
    for t in range(config.n_frames):
        positions[t] = pos
        # move pedestrians one at a time so no two ever share a cell
        for i in range(n_ped):
            order = rng.permutation(len(_STEPS))
            r, c = pos[i]
            for j in order:
                nr, nc = r + _STEPS[j, 0], c + _STEPS[j, 1]
                if not (0 <= nr < h and 0 <= nc < w):
                    continue
                if (nr, nc) != (r, c) and occupied[nr, nc]:
                    continue
                occupied[r, c] = False
                occupied[nr, nc] = True
                pos[i] = (nr, nc)
                break
    return World(config=config, seed=seed,
                 occupancy=_positions_to_occupancy(positions, h, w),
                 positions=positions)


# ---------------------------------------------------------------------------
# cameras and observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """One camera: a rectangular FoV mask over the grid."""

    camera_id: int
    mask: np.ndarray               # (H, W) float 0/1

    @property
    def coverage(self) -> float:
        return float(self.mask.sum())


def make_cameras(rng: np.random.Generator, config: SceneConfig) -> list[Camera]:
    """Camera FoVs per config.fov_mode.

    "bands": rectangular FoVs built from full-width row bands, so the union
    always covers the grid, then randomly grown for overlap diversity.
    "full": every camera sees the whole grid (views still differ through
    noise and occlusion draws), so any one camera is redundant.
    """
    h, w, k = config.grid_h, config.grid_w, config.n_cameras
    if config.fov_mode == "full":
        return [Camera(camera_id=i, mask=np.ones((h, w))) for i in range(k)]
    bounds = np.linspace(0, h, k + 1).astype(int)
    cameras = []
    for i in range(k):
        r0, r1 = int(bounds[i]), int(max(bounds[i + 1], bounds[i] + 1))
        grow_up = int(rng.integers(0, max(h // 3, 1) + 1))
        grow_down = int(rng.integers(0, max(h // 3, 1) + 1))
        c0 = int(rng.integers(0, max(w // 4, 1)))
        c1 = int(rng.integers(w - max(w // 4, 1) + 1, w + 1))
        mask = np.zeros((h, w))
        mask[max(r0 - grow_up, 0):min(r1 + grow_down, h), c0:c1] = 1.0
        # bands span all columns by construction of the base rows; the
        # column crop must not break union coverage, so keep base rows full
        mask[r0:r1, :] = 1.0
        cameras.append(Camera(camera_id=i, mask=mask))
    return cameras


def observe(occupancy: np.ndarray, camera: Camera, rng: np.random.Generator,
            noise_sigma: float, occlusion_rate: float) -> np.ndarray:
    """One camera view: (2, H, W) = (masked noisy occupancy, FoV mask)."""
    if occupancy.shape != camera.mask.shape:
        raise ShapeError(f"grid {occupancy.shape} vs mask {camera.mask.shape}")
    keep = (rng.random(occupancy.shape) >= occlusion_rate).astype(np.float64)
    noise = rng.normal(0.0, noise_sigma, size=occupancy.shape) if noise_sigma > 0 \
        else np.zeros_like(occupancy)
    signal = (occupancy * keep + noise) * camera.mask
    return np.stack([signal, camera.mask])


# ---------------------------------------------------------------------------
# encoders and the fusion head
# ---------------------------------------------------------------------------

def init_encoder(rng: np.random.Generator, prefix: str) -> ParamSet:
    """Per-camera feature encoder: (2,H,W) view -> (1,⌈H/2⌉,⌈W/2⌉) latent."""
    p = ParamSet()
    p.add(f"{prefix}/c1_w", ad.he_uniform(rng, (ENC_HIDDEN, 2, 3, 3)))
    p.add(f"{prefix}/c1_b", np.zeros((ENC_HIDDEN,)))
    p.add(f"{prefix}/c2_w", ad.he_uniform(rng, (1, ENC_HIDDEN, 3, 3)))
    p.add(f"{prefix}/c2_b", np.zeros((1,)))
    return p


def encode_view(x, params: ParamSet, prefix: str) -> Tensor:
    """Run one camera's encoder on a (N, 2, H, W) batch of views."""
    x = ad.as_tensor(x)
    if x.data.ndim != 4 or x.data.shape[1] != 2:
        raise ShapeError(f"encoder expects (N,2,H,W), got {x.shape}")
    h = ad.relu(ad.conv2d(x, params[f"{prefix}/c1_w"], params[f"{prefix}/c1_b"],
                          padding=1))
    return ad.conv2d(h, params[f"{prefix}/c2_w"], params[f"{prefix}/c2_b"],
                     stride=2, padding=1)


def init_fusion(rng: np.random.Generator, prefix: str = "fusion") -> ParamSet:
    """Aligner + fusion convolution + Bernoulli head (shared across cameras)."""
    p = ParamSet()
    p.add(f"{prefix}/align_w", ad.he_uniform(rng, (4 * ALIGN_CHANNELS, 1, 3, 3)))
    p.add(f"{prefix}/align_b", np.zeros((4 * ALIGN_CHANNELS,)))
    p.add(f"{prefix}/fuse_w", ad.he_uniform(rng, (FUSE_HIDDEN, ALIGN_CHANNELS, 3, 3)))
    p.add(f"{prefix}/fuse_b", np.zeros((FUSE_HIDDEN,)))
    p.add(f"{prefix}/head_w", ad.he_uniform(rng, (1, FUSE_HIDDEN, 1, 1)))
    p.add(f"{prefix}/head_b", np.zeros((1,)))
    return p


def align_latent(z, params: ParamSet, grid_h: int, grid_w: int,
                 prefix: str = "fusion") -> Tensor:
    """Lift a half-resolution latent back onto the ground plane.

    The aligner runs at latent resolution and emits four channel groups,
    one per position inside each 2x2 ground-plane block; depth-to-space
    then places them, so sub-block phase survives the upsampling.
    """
    z = ad.as_tensor(z)
    if z.data.ndim != 4 or z.data.shape[1] != 1:
        raise ShapeError(f"align expects (N,1,h,w), got {z.shape}")
    feat = ad.conv2d(z, params[f"{prefix}/align_w"], params[f"{prefix}/align_b"],
                     padding=1)
    return ad.crop2d(ad.depth_to_space(feat, 2), grid_h, grid_w)


def fuse_logits(latents: list, weights: Tensor, params: ParamSet,
                grid_h: int, grid_w: int, prefix: str = "fusion") -> Tensor:
    """Weighted sum of aligned latents -> fusion conv -> occupancy logits."""
    if len(latents) == 0:
        raise DomainError("fuse_logits needs at least one camera")
    if weights.data.shape != (len(latents),):
        raise ShapeError(f"{len(latents)} latents but weights {weights.shape}")
    fused = None
    for k, z in enumerate(latents):
        contrib = ad.mul(align_latent(z, params, grid_h, grid_w, prefix),
                         ad.pick(weights, k))
        fused = contrib if fused is None else ad.add(fused, contrib)
    h = ad.relu(ad.conv2d(fused, params[f"{prefix}/fuse_w"],
                          params[f"{prefix}/fuse_b"], padding=1))
    return ad.conv2d(h, params[f"{prefix}/head_w"], params[f"{prefix}/head_b"])


def fuse_and_decode(latents: list, weights: Tensor, params: ParamSet,
                    grid_h: int, grid_w: int, prefix: str = "fusion") -> Tensor:
    """Per-cell occupancy probabilities in (0,1)."""
    return ad.sigmoid(fuse_logits(latents, weights, params, grid_h, grid_w, prefix))


# ---------------------------------------------------------------------------
# MODA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModaResult:
    score: float
    false_negatives: int
    false_positives: int
    n_ground_truth: int
    degenerate: bool = False


def moda(pred_probs: np.ndarray, gt_positions: np.ndarray,
         threshold: float = 0.5, radius: float = 1.0) -> ModaResult:
    """1 - (FN + FP) / N_gt with greedy nearest matching.

    Candidate pairs within `radius` (cell units) match greedily in
    (distance, detection index, truth index) order, which makes the
    matching deterministic and independent of detection enumeration.
    """
    if not (0.0 < threshold < 1.0):
        raise DomainError(f"threshold must be in (0,1), got {threshold}")
    pred = np.asarray(pred_probs)
    gt = np.asarray(gt_positions, dtype=np.int64).reshape(-1, 2)
    det = np.argwhere(pred > threshold)
    n_gt, n_det = gt.shape[0], det.shape[0]

    if n_gt == 0:
        # degenerate frame: score against a virtual count of one
        return ModaResult(score=1.0 if n_det == 0 else 1.0 - float(n_det),
                          false_negatives=0, false_positives=n_det,
                          n_ground_truth=0, degenerate=True)

    pairs = []
    for i in range(n_det):
        d = np.hypot(det[i, 0] - gt[:, 0], det[i, 1] - gt[:, 1])
        for j in np.flatnonzero(d <= radius):
            pairs.append((float(d[j]), i, int(j)))
    pairs.sort()
    det_used = np.zeros(n_det, dtype=bool)
    gt_used = np.zeros(n_gt, dtype=bool)
    matched = 0
    for _, i, j in pairs:
        if not det_used[i] and not gt_used[j]:
            det_used[i] = gt_used[j] = True
            matched += 1
    fn = n_gt - matched
    fp = n_det - matched
    return ModaResult(score=1.0 - (fn + fp) / n_gt, false_negatives=fn,
                      false_positives=fp, n_ground_truth=n_gt)


def moda_sequence(results: list[ModaResult]) -> float:
    """Aggregate MODA over frames: pooled misses and false positives."""
    n_gt = sum(r.n_ground_truth for r in results)
    fn = sum(r.false_negatives for r in results)
    fp = sum(r.false_positives for r in results)
    if n_gt == 0:
        return 1.0 if (fn + fp) == 0 else 1.0 - float(fn + fp)
    return 1.0 - (fn + fp) / n_gt
