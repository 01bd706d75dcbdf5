"""Learned coding distributions for quantized latents.

Three distributions live here, all discretized Gaussians with predicted
parameters:

* temporal: per-element (mu, sigma) for Z_t conditioned on the tau
  previous quantized latents (used as a regularization target and
  reported as a diagnostic rate);
* conditional: per-element (mu, sigma) for Z given the decoded side
  info V (drives the coder for Z);
* prior: factorized per-channel (mu, sigma) for V itself (drives the
  coder for V).

V is produced from Z by a learned strided linear map that downsamples
4x in each spatial dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigurationError, DomainError, ShapeError

SIGMA_FLOOR = 1e-6
SIDE_FACTOR = 4           # spatial downsampling of the side info
ALPHABET_LO = -64         # coder alphabet bounds, inclusive
ALPHABET_HI = 63
# bias init putting softplus(raw) near 1, a sane starting spread
_RAW_SIGMA_ONE = float(np.log(np.expm1(1.0)))


# ---------------------------------------------------------------------------
# discretized Gaussian
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizedGaussian:
    """Gaussian integrated over unit bins on a bounded integer support.

    Bin b covers ((b-1/2)w, (b+1/2)w]; the two edge bins absorb the tails
    so the pmf always sums to one.
    """

    mu: float
    sigma: float
    bin_width: float = 1.0
    lo: int = ALPHABET_LO
    hi: int = ALPHABET_HI

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.bin_width <= 0.0:
            raise DomainError(f"bin_width must be positive, got {self.bin_width}")
        if self.lo >= self.hi:
            raise ConfigurationError(f"support [{self.lo}, {self.hi}] is empty")


def pmf(model: DiscretizedGaussian, bin_value: int) -> float:
    """Probability of one integer bin, tails folded into the edge bins."""
    if bin_value < model.lo or bin_value > model.hi:
        raise DomainError(f"bin {bin_value} outside support [{model.lo}, {model.hi}]")
    w, mu, sg = model.bin_width, model.mu, model.sigma
    upper = 1.0 if bin_value == model.hi else ndtr(((bin_value + 0.5) * w - mu) / sg)
    lower = 0.0 if bin_value == model.lo else ndtr(((bin_value - 0.5) * w - mu) / sg)
    return float(upper - lower)


def pmf_table(mu: np.ndarray, sigma: np.ndarray, lo: int = ALPHABET_LO,
              hi: int = ALPHABET_HI, bin_width: float = 1.0) -> np.ndarray:
    """Vectorized pmf over the whole support: (n_elements, n_symbols).

    Row i is the discretized Gaussian for (mu[i], sigma[i]); each row sums
    to 1 because the edge bins absorb the tails.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    if np.any(sigma <= 0.0):
        raise DomainError("pmf_table requires sigma > 0")
    if lo >= hi:
        raise ConfigurationError(f"support [{lo}, {hi}] is empty")
    edges = (np.arange(lo, hi, dtype=np.float64) + 0.5) * bin_width
    cdf = ndtr((edges - mu) / sigma)                     # (n, S-1)
    n = cdf.shape[0]
    table = np.empty((n, hi - lo + 1), dtype=np.float64)
    table[:, 0] = cdf[:, 0]
    table[:, 1:-1] = np.diff(cdf, axis=1)
    table[:, -1] = 1.0 - cdf[:, -1]
    np.clip(table, 0.0, None, out=table)                 # guard fp round-off
    return table


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats over a shared finite support.

    Returns math.inf when q has zero mass somewhere p does not.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise DomainError("pmf entries must be non-negative")
    live = p > 0.0
    if np.any(q[live] == 0.0):
        return float("inf")
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


# ---------------------------------------------------------------------------
# parameter prediction networks
# ---------------------------------------------------------------------------

class EntropyModel:
    """Bundles the temporal, conditional, and prior parameter maps."""

    def __init__(self, params: ParamSet, tau: int = 2, hidden: int = 8,
                 prefix: str = "entropy"):
        if tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {tau}")
        self.params = params
        self.tau = tau
        self.hidden = hidden
        self.prefix = prefix

    @classmethod
    def init(cls, rng: np.random.Generator, tau: int = 2, hidden: int = 8,
             prefix: str = "entropy") -> "EntropyModel":
        if tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {tau}")
        p = ParamSet()
        # temporal: tau stacked past latents -> hidden -> (mu, sigma)
        p.add(f"{prefix}/tau/mix_w", ad.he_uniform(rng, (hidden, tau, 1, 1)))
        p.add(f"{prefix}/tau/mix_b", np.zeros((hidden,)))
        p.add(f"{prefix}/tau/conv_w", ad.he_uniform(rng, (hidden, hidden, 3, 3)))
        p.add(f"{prefix}/tau/conv_b", np.zeros((hidden,)))
        p.add(f"{prefix}/tau/mu_w", ad.he_uniform(rng, (1, hidden, 1, 1)))
        p.add(f"{prefix}/tau/mu_b", np.zeros((1,)))
        p.add(f"{prefix}/tau/sigma_w", ad.he_uniform(rng, (1, hidden, 1, 1)))
        p.add(f"{prefix}/tau/sigma_b", np.full((1,), _RAW_SIGMA_ONE))
        # conditional: upsampled side info -> hidden -> (mu, sigma) for Z
        p.add(f"{prefix}/con/conv_w", ad.he_uniform(rng, (hidden, 1, 3, 3)))
        p.add(f"{prefix}/con/conv_b", np.zeros((hidden,)))
        p.add(f"{prefix}/con/mu_w", ad.he_uniform(rng, (1, hidden, 1, 1)))
        p.add(f"{prefix}/con/mu_b", np.zeros((1,)))
        p.add(f"{prefix}/con/sigma_w", ad.he_uniform(rng, (1, hidden, 1, 1)))
        p.add(f"{prefix}/con/sigma_b", np.full((1,), _RAW_SIGMA_ONE))
        # factorized prior over V: per-channel location and spread
        p.add(f"{prefix}/prior/mu", np.zeros((1,)))
        p.add(f"{prefix}/prior/sigma_raw", np.full((1,), _RAW_SIGMA_ONE))
        # side-info map: learned strided downsampler Z -> V
        p.add(f"{prefix}/side/w", ad.he_uniform(rng, (1, 1, SIDE_FACTOR, SIDE_FACTOR)))
        p.add(f"{prefix}/side/b", np.zeros((1,)))
        return cls(p, tau=tau, hidden=hidden, prefix=prefix)

    # -- temporal ----------------------------------------------------------
    def temporal_params(self, context) -> tuple[Tensor, Tensor]:
        """(mu, sigma) for Z_t given (N, tau, h, w) stacked past latents."""
        c = ad.as_tensor(context)
        if c.data.ndim != 4 or c.data.shape[1] != self.tau:
            raise ShapeError(f"context must be (N, {self.tau}, h, w), got {c.shape}")
        pf = self.prefix
        h = ad.relu(ad.conv2d(c, self.params[f"{pf}/tau/mix_w"],
                              self.params[f"{pf}/tau/mix_b"]))
        h = ad.relu(ad.conv2d(h, self.params[f"{pf}/tau/conv_w"],
                              self.params[f"{pf}/tau/conv_b"], padding=1))
        mu = ad.conv2d(h, self.params[f"{pf}/tau/mu_w"], self.params[f"{pf}/tau/mu_b"])
        sigma = ad.clamp_min(ad.softplus(
            ad.conv2d(h, self.params[f"{pf}/tau/sigma_w"],
                      self.params[f"{pf}/tau/sigma_b"])), SIGMA_FLOOR)
        return mu, sigma

    # -- side info ---------------------------------------------------------
    def side_info(self, z) -> Tensor:
        """Continuous V from Z via the learned strided map; (N,1,h,w) -> (N,1,⌈h/4⌉,⌈w/4⌉)."""
        z = ad.as_tensor(z)
        if z.data.ndim != 4 or z.data.shape[1] != 1:
            raise ShapeError(f"side_info expects (N,1,h,w), got {z.shape}")
        _, _, h, w = z.data.shape
        pad_h = (-h) % SIDE_FACTOR
        pad_w = (-w) % SIDE_FACTOR
        if pad_h or pad_w:
            z = ad.pad2d_rb(z, pad_h, pad_w)
        return ad.conv2d(z, self.params[f"{self.prefix}/side/w"],
                         self.params[f"{self.prefix}/side/b"], stride=SIDE_FACTOR)

    # -- conditional -------------------------------------------------------
    def conditional_params(self, v, out_h: int, out_w: int) -> tuple[Tensor, Tensor]:
        """(mu, sigma) for Z from (decoded or relaxed) side info V."""
        v = ad.as_tensor(v)
        if v.data.ndim != 4 or v.data.shape[1] != 1:
            raise ShapeError(f"conditional_params expects (N,1,h,w), got {v.shape}")
        up = ad.crop2d(ad.upsample2(ad.upsample2(v)), out_h, out_w)
        pf = self.prefix
        h = ad.relu(ad.conv2d(up, self.params[f"{pf}/con/conv_w"],
                              self.params[f"{pf}/con/conv_b"], padding=1))
        mu = ad.conv2d(h, self.params[f"{pf}/con/mu_w"], self.params[f"{pf}/con/mu_b"])
        sigma = ad.clamp_min(ad.softplus(
            ad.conv2d(h, self.params[f"{pf}/con/sigma_w"],
                      self.params[f"{pf}/con/sigma_b"])), SIGMA_FLOOR)
        return mu, sigma

    # -- factorized prior ----------------------------------------------------
    def prior_params(self, shape: tuple[int, ...]) -> tuple[Tensor, Tensor]:
        """(mu, sigma) tensors broadcast to `shape` for coding V."""
        pf = self.prefix
        mu = ad.mul(self.params[f"{pf}/prior/mu"], np.ones(shape))
        sigma = ad.clamp_min(ad.softplus(
            ad.mul(self.params[f"{pf}/prior/sigma_raw"], np.ones(shape))), SIGMA_FLOOR)
        return mu, sigma


def make_context(history: list[np.ndarray], tau: int,
                 shape: tuple[int, int]) -> np.ndarray:
    """Stack the last `tau` quantized latents as channels, oldest first.

    Missing early frames are zero-filled so the model is evaluable from t=0.
    """
    h, w = shape
    frames = []
    recent = history[-tau:]
    for _ in range(tau - len(recent)):
        frames.append(np.zeros((h, w)))
    for f in recent:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (h, w):
            raise ShapeError(f"history frame shape {f.shape} != latent {h, w}")
        frames.append(f)
    return np.stack(frames)[None, :, :, :]


def predict_params(past: list[np.ndarray], model: EntropyModel,
                   shape: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Per-element (mu, sigma) for the next latent given up to tau past frames."""
    return model.temporal_params(make_context(past, model.tau, shape))
