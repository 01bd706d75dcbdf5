"""Trainable testbed for priority-weighted multi-camera feature compression.

Cameras encode noisy occupancy views into latents, compress them with a
learned conditional entropy model, and ship bitstreams over a simulated
wireless link; an edge-side head fuses whatever arrives into pedestrian
occupancy. Per-camera priorities reweight both the distortion and the
rate penalty so stale or redundant links learn to go quiet.
"""

from .autodiff import ParamSet, Tensor, grad_check
from .channel import ChannelParams, LinkState, capacity, compute_sinr, delay, link_state
from .codec import Bitstream, FrameBitstream, decode_frame, encode_frame, quantize
from .entropy_model import DiscretizedGaussian, EntropyModel, kl_divergence, pmf
from .errors import (CoderError, ConfigurationError, DecodeError, DomainError,
                     ShapeError, TrainingError)
from .harness import (Adam, ExperimentConfig, build_batch, evaluate, setup_run,
                      sweep_delayed_cameras, sweep_rate_vs_moda, train)
from .losses import GateConfig, LossConfig, total_loss
from .priority import compute_weights, evaluate_priorities, priority_score
from .scene import SceneConfig, World, generate_world, moda, moda_sequence
from .verify import run_battery
from .version import VERSION as __version__

__all__ = [
    "Adam", "Bitstream", "ChannelParams", "CoderError", "ConfigurationError",
    "DecodeError", "DiscretizedGaussian", "DomainError", "EntropyModel",
    "ExperimentConfig", "FrameBitstream", "GateConfig", "LinkState",
    "LossConfig", "ParamSet", "SceneConfig", "ShapeError", "Tensor",
    "TrainingError", "World", "build_batch", "capacity", "compute_sinr",
    "compute_weights", "decode_frame", "delay", "encode_frame",
    "evaluate", "evaluate_priorities", "generate_world", "grad_check",
    "kl_divergence", "link_state", "moda", "moda_sequence", "pmf",
    "priority_score", "quantize", "run_battery", "setup_run",
    "sweep_delayed_cameras", "sweep_rate_vs_moda", "total_loss", "train",
    "__version__",
]
