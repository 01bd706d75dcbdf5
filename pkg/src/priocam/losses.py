"""The training objective: weighted distortion, clipped weighted rate,
temporal-model fit, and the delay-gated weight penalty.

Conventions used throughout:

* All likelihood terms are per-sample means in nats (sums over grid
  cells / latent elements, averaged over the batch axis).
* Quantization inside the loss uses the additive uniform(-1/2,1/2)
  noise relaxation; the noise arrays are drawn once per batch and
  carried as data so every forward pass over a fixed batch is a
  deterministic function of the parameters.
* The temporal term fits the temporal model to hard-quantized latents
  that are treated as data (no gradient into the encoders from this
  term); the transmitted-rate term is what shapes the encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import priority as prio
from .autodiff import ParamSet, Tensor
from .codec import quantize
from .entropy_model import EntropyModel
from .errors import ConfigurationError, DomainError, ShapeError, TrainingError
from .scene import encode_view, fuse_logits

LN2 = float(np.log(2.0))
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GateConfig:
    """Delay threshold and target weight for the L3 penalty."""

    epsilon: float = 0.5
    w_target: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ConfigurationError(f"epsilon must be in (0,1], got {self.epsilon}")
        if not (0.0 <= self.w_target <= 1.0):
            raise ConfigurationError(f"w_target must be in [0,1], got {self.w_target}")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    r_max_bits_per_element: float = 2.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    gate: GateConfig = field(default_factory=GateConfig)
    w0_mode: str = "max"          # "max" or "const"
    w0_const: float = 1.0
    weight_mode: str = "learned"  # "learned" or "equal" (the ablation)

    def __post_init__(self):
        if self.lam < 0.0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.r_max_bits_per_element <= 0.0:
            raise ConfigurationError("r_max_bits_per_element must be positive")
        if self.alpha2 < 0.0 or self.alpha3 < 0.0:
            raise ConfigurationError("loss scales alpha2/alpha3 must be non-negative")
        if self.weight_mode not in ("learned", "equal"):
            raise ConfigurationError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass
class CameraBatch:
    """Per-camera slice of one training batch (arrays are plain data)."""

    x: np.ndarray                  # (N, 2, H, W) observed views
    context: np.ndarray | None     # (N, tau, h, w) past quantized latents
    noise_z: np.ndarray            # (N, 1, h, w) frozen uniform(-1/2,1/2)
    noise_v: np.ndarray            # (N, 1, hv, wv) frozen uniform(-1/2,1/2)
    d_norm: float
    coverage_norm: float


@dataclass
class Batch:
    y: np.ndarray                  # (N, 1, H, W) occupancy ground truth
    cameras: list[CameraBatch]


@dataclass
class Models:
    """Everything trainable, plus the namespaces that address it."""

    params: ParamSet
    entropy: list[EntropyModel]    # one per camera, tensors shared via params
    enc_prefixes: list[str]
    fusion_prefix: str = "fusion"
    priority_prefix: str = "priority"


@dataclass(frozen=True)
class LossBreakdown:
    """Plain-value snapshot of one loss evaluation (for logs and tests)."""

    weights: np.ndarray
    w0: float
    distortion_per_camera: np.ndarray      # nats/sample
    rate_base_per_camera: np.ndarray       # nats/sample, before the weight factor
    rate_raw_per_camera: np.ndarray        # nats/sample, x e^(w0-w_k)
    rate_clipped_per_camera: np.ndarray    # nats/sample, min with R_max
    rate_temporal_per_camera: np.ndarray   # nats/sample under the temporal model
    l2_per_camera: np.ndarray
    l1: float
    l2: float
    l3: float
    total: float
    lam: float
    r_max_nats: float
    l2_warmup: bool


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------

def distortion_term(w_k: Tensor, mean_log_q: Tensor) -> Tensor:
    """-w_k * E[log q(Y|Z)], the weighted Bernoulli cross-entropy."""
    wv = float(w_k.data)
    if not (0.0 < wv <= 1.0):
        raise DomainError(f"weight must be in (0,1], got {wv}")
    if not np.isfinite(mean_log_q.data):
        raise TrainingError("non-finite decoder log-likelihood")
    return ad.mul(ad.mul(w_k, mean_log_q), -1.0)


def rate_term(w_k: Tensor, w0: Tensor, rate_nats: Tensor,
              r_max_nats: float) -> Tensor:
    """min(R_max, rate * e^(w0 - w_k)); gradient only through the open branch."""
    if float(w0.data) < float(w_k.data) - 1e-9:
        raise DomainError(f"w0 {float(w0.data)} < w_k {float(w_k.data)}")
    if float(rate_nats.data) < 0.0:
        raise DomainError("rate must be non-negative")
    scaled = ad.mul(rate_nats, ad.exp(ad.sub(w0, w_k)))
    return ad.clip_upper(scaled, r_max_nats)


def loss_L3(w: Tensor, d_norm: np.ndarray, gate: GateConfig) -> Tensor:
    """Sum of (w - W_target)^2 over on-time cameras plus w^2 over late ones.

    d_norm exactly at epsilon contributes nothing.
    """
    d = np.asarray(d_norm, dtype=np.float64)
    if d.shape != w.data.shape:
        raise ShapeError(f"d_norm {d.shape} vs weights {w.shape}")
    on_time = (d < gate.epsilon).astype(np.float64)
    late = (d > gate.epsilon).astype(np.float64)
    on_term = ad.tsum(ad.mul(Tensor(on_time), ad.square(ad.sub(w, gate.w_target))))
    late_term = ad.tsum(ad.mul(Tensor(late), ad.square(w)))
    return ad.add(on_term, late_term)


def _mean_neg_log(p: Tensor, n: int) -> Tensor:
    """Per-sample cross-entropy in nats from elementwise probabilities."""
    return ad.mul(ad.tsum(ad.log(ad.clamp_min(p, PROB_FLOOR))), -1.0 / n)


def empirical_entropy(context: np.ndarray, target: np.ndarray) -> float:
    """Per-sample entropy (nats) of targets grouped by identical context.

    Each latent element is treated as its own symbol stream; groups are
    batch rows sharing a bit-identical context.
    """
    n = target.shape[0]
    groups: dict[bytes, list[int]] = {}
    for i in range(n):
        groups.setdefault(context[i].tobytes(), []).append(i)
    total = 0.0
    for idx in groups.values():
        vals = target[idx].reshape(len(idx), -1)
        g = vals.shape[0]
        if g == 1:
            continue
        for j in range(vals.shape[1]):
            _, counts = np.unique(vals[:, j], return_counts=True)
            pr = counts / g
            total += -g * float(np.sum(pr * np.log(pr)))
    return total / n


def loss_L2_camera(context: np.ndarray, z_quantized: np.ndarray,
                   model: EntropyModel) -> tuple[Tensor, float]:
    """Empirical KL to the temporal model for one camera.

    Returns (cross-entropy - empirical entropy, cross-entropy value);
    the gradient reaches only the temporal parameters.
    """
    n = z_quantized.shape[0]
    mu, sigma = model.temporal_params(context)
    p = ad.box_prob(Tensor(z_quantized.astype(np.float64)), mu, sigma)
    ce = _mean_neg_log(p, n)
    ent = empirical_entropy(context, z_quantized)
    return ad.sub(ce, ent), float(ce.data)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def compute_batch_weights(batch: Batch, models: Models,
                          cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Priority weights for the batch's cameras (or the fixed ablation)."""
    k = len(batch.cameras)
    if cfg.weight_mode == "equal":
        return Tensor(np.full(k, 1.0 / k)), Tensor(1.0 / k)
    scores = prio.score_vector(
        [(c.d_norm, c.coverage_norm) for c in batch.cameras],
        models.params, prefix=models.priority_prefix)
    return prio.compute_weights(scores, w0_mode=cfg.w0_mode, w0_const=cfg.w0_const)


def total_loss(batch: Batch, models: Models,
               cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Assemble L1 + alpha2*L2 + alpha3*L3 over one batch.

    Returns the scalar loss tensor (call backward on it) and a plain-value
    breakdown for logging.
    """
    k = len(batch.cameras)
    if k == 0:
        raise DomainError("batch has no cameras")
    if k != len(models.entropy) or k != len(models.enc_prefixes):
        raise ShapeError(f"{k} cameras but {len(models.entropy)} entropy models "
                         f"and {len(models.enc_prefixes)} encoders")
    n = batch.y.shape[0]
    if n == 0:
        raise DomainError("empty batch")
    grid_h, grid_w = batch.y.shape[2], batch.y.shape[3]

    w, w0 = compute_batch_weights(batch, models, cfg)

    latents = []
    rate_base_t: list[Tensor] = []
    l2_terms: list[Tensor] = []
    rate_temporal = np.zeros(k)
    l2_values = np.zeros(k)
    r_max_nats = None
    l2_warmup = False

    for i, cam in enumerate(batch.cameras):
        if cam.x.shape[0] != n:
            raise ShapeError(f"camera {i} batch size {cam.x.shape[0]} != {n}")
        z = encode_view(cam.x, models.params, models.enc_prefixes[i])
        if cam.noise_z.shape != z.data.shape:
            raise ShapeError(f"camera {i} noise_z {cam.noise_z.shape} != latent {z.shape}")
        z_noisy = ad.add(z, cam.noise_z)
        latents.append(z_noisy)
        em = models.entropy[i]

        v = em.side_info(z)
        if cam.noise_v.shape != v.data.shape:
            raise ShapeError(f"camera {i} noise_v {cam.noise_v.shape} != side {v.shape}")
        v_noisy = ad.add(v, cam.noise_v)

        mu_c, sigma_c = em.conditional_params(v_noisy, z.data.shape[2], z.data.shape[3])
        rate_z = _mean_neg_log(ad.box_prob(z_noisy, mu_c, sigma_c), n)
        mu_l, sigma_l = em.prior_params(v_noisy.data.shape)
        rate_v = _mean_neg_log(ad.box_prob(v_noisy, mu_l, sigma_l), n)
        rate_base_t.append(ad.add(rate_z, rate_v))

        if r_max_nats is None:
            elements = (z.data.size + v.data.size) / n
            r_max_nats = cfg.r_max_bits_per_element * LN2 * elements

        if cam.context is None:
            l2_warmup = True
        else:
            zq = quantize(z.data)
            l2_k, ce_k = loss_L2_camera(cam.context, zq, em)
            l2_terms.append(l2_k)
            rate_temporal[i] = ce_k
            l2_values[i] = float(l2_k.data)

    logits = fuse_logits(latents, w, models.params, grid_h, grid_w,
                         models.fusion_prefix)
    bce = ad.bce_with_logits(logits, batch.y)
    mean_log_q = ad.mul(bce, -1.0 / n)

    dist_terms = []
    rate_clipped_t = []
    for i in range(k):
        w_i = ad.pick(w, i)
        dist_terms.append(distortion_term(w_i, mean_log_q))
        rate_clipped_t.append(rate_term(w_i, w0, rate_base_t[i], r_max_nats))

    l1 = dist_terms[0]
    for t in dist_terms[1:]:
        l1 = ad.add(l1, t)
    rate_sum = rate_clipped_t[0]
    for t in rate_clipped_t[1:]:
        rate_sum = ad.add(rate_sum, t)
    l1 = ad.add(l1, ad.mul(rate_sum, cfg.lam))

    if l2_terms:
        l2 = l2_terms[0]
        for t in l2_terms[1:]:
            l2 = ad.add(l2, t)
    else:
        l2 = Tensor(0.0)
    l3 = loss_L3(w, np.array([c.d_norm for c in batch.cameras]), cfg.gate)

    total = ad.add(ad.add(l1, ad.mul(l2, cfg.alpha2)), ad.mul(l3, cfg.alpha3))
    if not np.isfinite(total.data):
        raise TrainingError("non-finite total loss")

    rate_base = np.array([float(t.data) for t in rate_base_t])
    factors = np.exp(float(w0.data) - w.data)
    breakdown = LossBreakdown(
        weights=w.data.copy(),
        w0=float(w0.data),
        distortion_per_camera=np.array([float(t.data) for t in dist_terms]),
        rate_base_per_camera=rate_base,
        rate_raw_per_camera=rate_base * factors,
        rate_clipped_per_camera=np.array([float(t.data) for t in rate_clipped_t]),
        rate_temporal_per_camera=rate_temporal,
        l2_per_camera=l2_values,
        l1=float(l1.data),
        l2=float(l2.data),
        l3=float(l3.data),
        total=float(total.data),
        lam=cfg.lam,
        r_max_nats=float(r_max_nats),
        l2_warmup=l2_warmup,
    )
    return total, breakdown
