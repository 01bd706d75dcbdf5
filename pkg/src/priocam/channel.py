"""Physical-layer link model: SINR, Shannon capacity, transmission delay.

Pure functions over value types. Path loss follows the log-distance model
with log-normal shadowing; the denominator lumps received interference and
thermal noise. Shadowing is sampled once per camera per run by the caller,
so replay is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

SPEED_OF_LIGHT = 299_792_458.0  # m/s


def free_space_reference_loss(carrier_freq: float, reference_distance: float) -> float:
    """Free-space path loss in dB at the reference distance."""
    if carrier_freq <= 0.0 or reference_distance <= 0.0:
        raise ConfigurationError("carrier_freq and reference_distance must be positive")
    return 20.0 * math.log10(4.0 * math.pi * reference_distance * carrier_freq / SPEED_OF_LIGHT)


@dataclass(frozen=True)
class ChannelParams:
    """Per-camera physical-layer parameters.

    ``interference_power`` is the aggregate interference power measured at
    the receiver, in watts. ``reference_loss`` may be None, in which case
    the free-space value at ``reference_distance`` is used.
    """

    carrier_freq: float = 2.4e9          # Hz
    bandwidth: float = 2e6               # Hz, B_k
    path_loss_exponent: float = 3.5
    shadowing_sigma: float = 8.0         # dB
    tx_power: float = 0.1                # W
    interference_power: float = 1e-14    # W, received
    noise_density: float = -174.0        # dBm/Hz, thermal floor
    distance: float = 500.0              # m
    reference_distance: float = 1.0      # m
    reference_loss: float | None = None  # dB; None -> free-space at d0

    def __post_init__(self):
        if self.bandwidth <= 0.0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.path_loss_exponent <= 0.0:
            raise ConfigurationError(
                f"path_loss_exponent must be positive, got {self.path_loss_exponent}")
        if self.reference_distance <= 0.0:
            raise ConfigurationError(
                f"reference_distance must be positive, got {self.reference_distance}")
        if self.distance < self.reference_distance:
            raise ConfigurationError(
                f"distance {self.distance} < reference_distance {self.reference_distance}")
        if self.tx_power <= 0.0:
            raise ConfigurationError(f"tx_power must be positive, got {self.tx_power}")
        if self.interference_power < 0.0:
            raise ConfigurationError(
                f"interference_power must be non-negative, got {self.interference_power}")
        if self.shadowing_sigma < 0.0:
            raise ConfigurationError(
                f"shadowing_sigma must be non-negative, got {self.shadowing_sigma}")

    def resolved_reference_loss(self) -> float:
        if self.reference_loss is not None:
            return self.reference_loss
        return free_space_reference_loss(self.carrier_freq, self.reference_distance)


@dataclass(frozen=True)
class LinkState:
    """Resolved link quantities for one camera."""

    snr_linear: float
    capacity: float       # bit/s
    payload_bits: float   # D
    delay: float          # s; math.inf when the link is dead
    delay_norm: float     # clamped to [0, 1]
    delay_max: float      # s


def compute_sinr(params: ChannelParams, shadowing_sample: float = 0.0) -> float:
    """Linear-scale SINR at the edge receiver for one camera.

    PL(d) = L0 + 10 n log10(d/d0) + shadowing, all in dB; the received
    power is then divided by (interference + thermal noise) in watts.
    """
    path_loss_db = (params.resolved_reference_loss()
                    + 10.0 * params.path_loss_exponent
                    * math.log10(params.distance / params.reference_distance)
                    + shadowing_sample)
    tx_dbm = 10.0 * math.log10(params.tx_power * 1000.0)
    rx_w = 10.0 ** ((tx_dbm - path_loss_db) / 10.0) / 1000.0
    noise_dbm = params.noise_density + 10.0 * math.log10(params.bandwidth)
    noise_w = 10.0 ** (noise_dbm / 10.0) / 1000.0
    return rx_w / (params.interference_power + noise_w)


def capacity(bandwidth: float, snr_linear: float) -> float:
    """Shannon capacity B * log2(1 + SNR) in bit/s."""
    if bandwidth <= 0.0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    if snr_linear < 0.0:
        raise DomainError(f"snr must be non-negative, got {snr_linear}")
    return bandwidth * math.log2(1.0 + snr_linear)


def delay(payload_bits: float, link_capacity: float) -> float:
    """Transmission delay D / C in seconds; inf when the link carries nothing."""
    if payload_bits < 0.0:
        raise DomainError(f"payload_bits must be non-negative, got {payload_bits}")
    if link_capacity < 0.0:
        raise DomainError(f"capacity must be non-negative, got {link_capacity}")
    if link_capacity == 0.0:
        return 0.0 if payload_bits == 0.0 else math.inf
    return payload_bits / link_capacity


def normalize_delay(delay_s: float, delay_max: float) -> float:
    """min(delay / delay_max, 1); super-maximal delays count as fully late."""
    if delay_max <= 0.0:
        raise ConfigurationError(f"delay_max must be positive, got {delay_max}")
    if delay_s < 0.0:
        raise DomainError(f"delay must be non-negative, got {delay_s}")
    return min(delay_s / delay_max, 1.0)


def sample_shadowing(params: ChannelParams, rng: np.random.Generator) -> float:
    """One shadowing draw in dB; call once per camera per run."""
    return float(rng.normal(0.0, params.shadowing_sigma))


def link_state(params: ChannelParams, payload_bits: float, delay_max: float,
               shadowing_sample: float = 0.0) -> LinkState:
    """Compose SINR -> capacity -> delay -> normalized delay for one camera."""
    snr = compute_sinr(params, shadowing_sample)
    cap = capacity(params.bandwidth, snr)
    d = delay(payload_bits, cap)
    return LinkState(snr_linear=snr, capacity=cap, payload_bits=payload_bits,
                     delay=d, delay_norm=normalize_delay(d, delay_max),
                     delay_max=delay_max)
