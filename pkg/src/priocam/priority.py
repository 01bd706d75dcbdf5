"""Camera priority network: (normalized delay, coverage) -> softmax weights.

A dual-layer MLP scores each camera from two scalars; the scores pass
through a softmax to give weights that sum to one, and the reference
weight w0 is the running maximum of those weights (so every rate scale
factor e^{w0 - w_k} lands in [1, e)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigurationError, DomainError, TrainingError

HIDDEN_WIDTH = 16


@dataclass(frozen=True)
class CameraCoverage:
    """Raw coverage area of one camera with the shared normalization bounds."""

    coverage: float
    lower: float
    upper: float

    @property
    def normalized(self) -> float:
        return normalize_coverage(self.coverage, self.lower, self.upper)


@dataclass(frozen=True)
class PriorityState:
    """Evaluated priorities for one set of cameras (values only, no graph)."""

    scores: np.ndarray
    weights: np.ndarray
    w0: float


def normalize_coverage(coverage: float, lower: float, upper: float) -> float:
    """clamp((CO - CO_L) / (CO_U - CO_L), 0, 1)."""
    if lower >= upper:
        raise ConfigurationError(f"coverage bounds must satisfy lower < upper, got [{lower}, {upper}]")
    return min(max((coverage - lower) / (upper - lower), 0.0), 1.0)


def init_theta_m(rng: np.random.Generator, hidden: int = HIDDEN_WIDTH,
                 prefix: str = "priority") -> ParamSet:
    """Fresh 2 -> hidden -> 1 MLP parameters, uniform(-0.1, 0.1).

    Deliberately small: scores start near zero so the softmax begins close
    to equal weighting and the gate loss steers it from a neutral state.
    """
    if hidden < 1:
        raise ConfigurationError(f"hidden width must be >= 1, got {hidden}")
    theta = ParamSet()
    theta.add(f"{prefix}/w1", rng.uniform(-0.1, 0.1, size=(hidden, 2)))
    theta.add(f"{prefix}/b1", rng.uniform(-0.1, 0.1, size=(hidden,)))
    theta.add(f"{prefix}/w2", rng.uniform(-0.1, 0.1, size=(1, hidden)))
    theta.add(f"{prefix}/b2", rng.uniform(-0.1, 0.1, size=(1,)))
    return theta


def _check_finite(theta: ParamSet, prefix: str) -> None:
    for name in (f"{prefix}/w1", f"{prefix}/b1", f"{prefix}/w2", f"{prefix}/b2"):
        if not np.all(np.isfinite(theta[name].data)):
            raise TrainingError(f"non-finite priority parameter {name}")


def priority_score(d_norm: float, coverage_norm: float, theta: ParamSet,
                   prefix: str = "priority") -> Tensor:
    """Raw priority score for one camera; shape (1,), stays on the tape."""
    _check_finite(theta, prefix)
    # normalizations already target [0,1]; clamping guards config drift
    x = Tensor(np.clip([d_norm, coverage_norm], 0.0, 1.0))
    h = ad.relu(ad.linear_forward(x, theta[f"{prefix}/w1"], theta[f"{prefix}/b1"]))
    return ad.linear_forward(h, theta[f"{prefix}/w2"], theta[f"{prefix}/b2"])


def score_vector(inputs: list[tuple[float, float]], theta: ParamSet,
                 prefix: str = "priority") -> Tensor:
    """Scores for all cameras, concatenated to shape (K,)."""
    if not inputs:
        raise DomainError("score_vector needs at least one camera")
    return ad.concat([priority_score(d, c, theta, prefix) for d, c in inputs], axis=0)


def compute_weights(p: Tensor, w0_mode: str = "max",
                    w0_const: float = 1.0) -> tuple[Tensor, Tensor]:
    """Softmax weights and the reference weight w0, both differentiable.

    w0_mode "max" takes the running maximum of the weights (default);
    "const" fixes w0 at `w0_const` and detaches it from the graph.
    """
    w = ad.softmax(p)
    if w0_mode == "max":
        w0 = ad.tmax(w)
    elif w0_mode == "const":
        w0 = Tensor(float(w0_const))
    else:
        raise ConfigurationError(f"unknown w0_mode {w0_mode!r}")
    return w, w0


def evaluate_priorities(inputs: list[tuple[float, float]], theta: ParamSet,
                        w0_mode: str = "max", w0_const: float = 1.0,
                        prefix: str = "priority") -> PriorityState:
    """Forward pass for diagnostics; returns plain values, no graph."""
    p = score_vector(inputs, theta, prefix)
    w, w0 = compute_weights(p, w0_mode=w0_mode, w0_const=w0_const)
    return PriorityState(scores=p.data.copy(), weights=w.data.copy(), w0=float(w0.data))
