"""Quantization, range coding, and the bitstream wire format.

The entropy coder is a classical 32-bit range coder with carry
propagation (cache byte plus pending-0xFF chain, 5-byte flush). Every
element of a tensor is coded against its own discretized Gaussian,
scaled to integer frequencies summing to exactly 2**16 with every
alphabet symbol kept at >= 1 count, so any in-range value stays
codable no matter how unlikely the model thinks it is.

Wire format (all integers little-endian):

  Tensor stream ("PCBS"):
    magic 4s | version u8 | camera_id u16 | frame_index u32 | tau u8 |
    model_revision u32 | ndim u8 | dims u16 x ndim | payload_len u32 |
    payload_crc32 u32 | payload bytes

  Frame stream ("PCFR"):
    magic 4s | version u8 | camera_id u16 | frame_index u32 |
    V tensor stream | Z tensor stream

The decoder reads V first, rebuilds the conditional model from the
decoded side info, then decodes Z; that order is part of the format.
Reported payload bits count payload bytes only, headers excluded.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .entropy_model import ALPHABET_HI, ALPHABET_LO, EntropyModel, pmf_table
from .errors import CoderError, DecodeError, DomainError, ShapeError

FORMAT_VERSION = 1
TENSOR_MAGIC = b"PCBS"
FRAME_MAGIC = b"PCFR"

_TOTAL_BITS = 16
TOTAL_FREQ = 1 << _TOTAL_BITS
_TOP_VALUE = 1 << 24
_MASK32 = 0xFFFFFFFF

LOG2E = float(np.log2(np.e))


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def quantize(z) -> np.ndarray:
    """Round half away from zero, then clamp to the coder alphabet."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError("quantize requires finite values")
    rounded = np.copysign(np.floor(np.abs(data) + 0.5), data)
    return np.clip(rounded, ALPHABET_LO, ALPHABET_HI).astype(np.int64)


@dataclass(frozen=True)
class QuantizedFeature:
    """Integer latent plus its stream identity."""

    values: np.ndarray
    camera_id: int = 0
    frame_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size and (v.min() < ALPHABET_LO or v.max() > ALPHABET_HI):
            raise DomainError(
                f"values outside alphabet [{ALPHABET_LO}, {ALPHABET_HI}]")


# ---------------------------------------------------------------------------
# frequency tables
# ---------------------------------------------------------------------------

def quantize_freqs(probs: np.ndarray) -> np.ndarray:
    """Scale pmf rows to integer frequencies summing to exactly TOTAL_FREQ.

    Floor-then-largest-remainder, with every symbol forced to >= 1 count;
    ties and over-allocation resolve by fixed index order so encoder and
    decoder always derive identical tables.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, s = p.shape
    if s < 2:
        raise DomainError("alphabet must have at least 2 symbols")
    scaled = p * TOTAL_FREQ
    base = np.maximum(np.floor(scaled), 1.0).astype(np.int64)
    diff = TOTAL_FREQ - base.sum(axis=1)

    grant = np.flatnonzero(diff > 0)
    if grant.size:
        # hand the missing counts to the largest remainders
        rem = scaled[grant] - base[grant]
        idx = np.broadcast_to(np.arange(s), rem.shape)
        order = np.lexsort((idx, -rem), axis=-1)
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, idx.copy(), axis=-1)
        base[grant] += ranks < diff[grant, None]

    for i in np.flatnonzero(diff < 0):
        # claw back the excess one count at a time from whichever bin is
        # currently most over-allocated, never dropping a bin below 1
        heap = [(scaled[i, j] - base[i, j], j)
                for j in range(s) if base[i, j] > 1]
        heapq.heapify(heap)
        for _ in range(-int(diff[i])):
            while heap and base[i, heap[0][1]] <= 1:
                heapq.heappop(heap)
            if not heap:
                raise CoderError("cannot normalize frequency table")
            under, j = heapq.heappop(heap)
            base[i, j] -= 1
            heapq.heappush(heap, (under + 1.0, j))
    return base


def _freq_tables(mu: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element (freq, cumfreq) integer tables for the full alphabet."""
    probs = pmf_table(mu, sigma)
    freqs = quantize_freqs(probs)
    cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return freqs, cum


# ---------------------------------------------------------------------------
# range coder core
# ---------------------------------------------------------------------------

class _RangeEncoder:
    """32-bit range encoder with carry propagation via a cache byte."""

    def __init__(self):
        self.low = 0                 # up to 33 bits before shift_low
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self.cache_size - 1):
                self.out.append(filler)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, start: int, freq: int, total: int) -> None:
        if freq <= 0:
            raise CoderError("zero-frequency symbol cannot be coded")
        r = self.range // total
        self.low += start * r
        self.range = freq * r
        while self.range < _TOP_VALUE:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _RangeDecoder:
    """Mirror of _RangeEncoder; consumes exactly the bytes it produced."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0
        self.range = _MASK32
        self._next_byte()                    # first byte absorbs any carry
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.payload):
            raise DecodeError("range coder ran past end of payload", self.pos)
        b = self.payload[self.pos]
        self.pos += 1
        return b

    def threshold(self, total: int) -> int:
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def consume(self, start: int, freq: int) -> None:
        self.code = (self.code - start * self._r) & _MASK32
        self.range = freq * self._r
        while self.range < _TOP_VALUE:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32


# ---------------------------------------------------------------------------
# bitstream containers
# ---------------------------------------------------------------------------

_TENSOR_HEAD = struct.Struct("<4sBHIBIB")    # magic..ndim
_TENSOR_TAIL = struct.Struct("<II")          # payload_len, crc32
_FRAME_HEAD = struct.Struct("<4sBHI")


@dataclass(frozen=True)
class Bitstream:
    """One entropy-coded tensor plus its self-describing header."""

    camera_id: int
    frame_index: int
    tau: int
    model_revision: int
    shape: tuple[int, ...]
    payload: bytes = field(repr=False)

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        head = _TENSOR_HEAD.pack(TENSOR_MAGIC, FORMAT_VERSION, self.camera_id,
                                 self.frame_index, self.tau,
                                 self.model_revision, len(self.shape))
        dims = struct.pack(f"<{len(self.shape)}H", *self.shape)
        tail = _TENSOR_TAIL.pack(len(self.payload), zlib.crc32(self.payload))
        return head + dims + tail + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["Bitstream", int]:
        try:
            magic, version, cam, frame, tau, rev, ndim = _TENSOR_HEAD.unpack_from(buf, offset)
        except struct.error as e:
            raise DecodeError(f"truncated tensor header: {e}", offset) from e
        if magic != TENSOR_MAGIC:
            raise DecodeError(f"bad tensor magic {magic!r}", offset)
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported format version {version}", offset + 4)
        pos = offset + _TENSOR_HEAD.size
        try:
            shape = struct.unpack_from(f"<{ndim}H", buf, pos)
            pos += 2 * ndim
            paylen, crc = _TENSOR_TAIL.unpack_from(buf, pos)
            pos += _TENSOR_TAIL.size
        except struct.error as e:
            raise DecodeError(f"truncated tensor header: {e}", pos) from e
        payload = bytes(buf[pos:pos + paylen])
        if len(payload) != paylen:
            raise DecodeError(f"payload truncated: want {paylen}, have {len(payload)}", pos)
        if zlib.crc32(payload) != crc:
            raise DecodeError("payload checksum mismatch", pos)
        return cls(camera_id=cam, frame_index=frame, tau=tau, model_revision=rev,
                   shape=tuple(shape), payload=payload), pos + paylen - offset


@dataclass(frozen=True)
class FrameBitstream:
    """Per-frame wire unit: header, then V's stream, then Z's stream."""

    camera_id: int
    frame_index: int
    v_stream: Bitstream
    z_stream: Bitstream

    @property
    def payload_bits(self) -> int:
        return self.v_stream.payload_bits + self.z_stream.payload_bits

    def to_bytes(self) -> bytes:
        head = _FRAME_HEAD.pack(FRAME_MAGIC, FORMAT_VERSION,
                                self.camera_id, self.frame_index)
        return head + self.v_stream.to_bytes() + self.z_stream.to_bytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["FrameBitstream", int]:
        try:
            magic, version, cam, frame = _FRAME_HEAD.unpack_from(buf, offset)
        except struct.error as e:
            raise DecodeError(f"truncated frame header: {e}", offset) from e
        if magic != FRAME_MAGIC:
            raise DecodeError(f"bad frame magic {magic!r}", offset)
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported format version {version}", offset + 4)
        pos = offset + _FRAME_HEAD.size
        v_stream, used = Bitstream.from_bytes(buf, pos)
        pos += used
        z_stream, used = Bitstream.from_bytes(buf, pos)
        pos += used
        return cls(camera_id=cam, frame_index=frame,
                   v_stream=v_stream, z_stream=z_stream), pos - offset


# ---------------------------------------------------------------------------
# tensor-level encode / decode / rate estimate
# ---------------------------------------------------------------------------

def encode_tensor(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                  camera_id: int = 0, frame_index: int = 0, tau: int = 0,
                  model_revision: int = 0) -> Bitstream:
    """Entropy-code an integer tensor against per-element Gaussians."""
    values = np.asarray(values)
    if values.size != np.asarray(mu).size:
        raise ShapeError(f"model count {np.asarray(mu).size} != element count {values.size}")
    flat = values.reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < ALPHABET_LO or flat.max() > ALPHABET_HI):
        raise DomainError(f"values outside alphabet [{ALPHABET_LO}, {ALPHABET_HI}]")
    enc = _RangeEncoder()
    if flat.size:
        freqs, cum = _freq_tables(mu, sigma)
        sym = flat - ALPHABET_LO
        for i in range(flat.size):
            s = sym[i]
            enc.encode(int(cum[i, s]), int(freqs[i, s]), TOTAL_FREQ)
    return Bitstream(camera_id=camera_id, frame_index=frame_index, tau=tau,
                     model_revision=model_revision, shape=tuple(values.shape),
                     payload=enc.finish())


def decode_tensor(bs: Bitstream, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_tensor given the same model sequence."""
    n = int(np.prod(bs.shape)) if bs.shape else 1
    n = 0 if 0 in bs.shape else n
    if n != np.asarray(mu).size:
        raise ShapeError(f"model count {np.asarray(mu).size} != element count {n}")
    out = np.empty(n, dtype=np.int64)
    if n:
        freqs, cum = _freq_tables(mu, sigma)
        dec = _RangeDecoder(bs.payload)
        for i in range(n):
            v = dec.threshold(TOTAL_FREQ)
            s = int(np.searchsorted(cum[i], v, side="right")) - 1
            dec.consume(int(cum[i, s]), int(freqs[i, s]))
            out[i] = s + ALPHABET_LO
    elif len(bs.payload) != 5:
        raise DecodeError("empty tensor must carry a bare flush payload", 0)
    return out.reshape(bs.shape)


def rate_estimate_bits(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Model cross-entropy of the values: sum of -log2 pmf, in bits."""
    values = np.asarray(values).reshape(-1).astype(np.int64)
    if values.size == 0:
        return 0.0
    if values.min() < ALPHABET_LO or values.max() > ALPHABET_HI:
        raise DomainError(f"values outside alphabet [{ALPHABET_LO}, {ALPHABET_HI}]")
    probs = pmf_table(mu, sigma)
    p = probs[np.arange(values.size), values - ALPHABET_LO]
    # float tails can round to exactly zero; floor only to keep the sum finite
    return float(-np.log2(np.maximum(p, 1e-300)).sum())


# ---------------------------------------------------------------------------
# frame-level pipeline (side info first, then the latent)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameEncodeResult:
    stream: FrameBitstream
    z_hat: np.ndarray            # decoded-quantized latent, (1,1,h,w) ints
    v_hat: np.ndarray            # decoded-quantized side info
    z_bits_estimate: float
    v_bits_estimate: float


def encode_frame(z: np.ndarray, model: EntropyModel, camera_id: int = 0,
                 frame_index: int = 0, model_revision: int = 0) -> FrameEncodeResult:
    """Code one continuous latent: V under its prior, Z conditioned on V."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[0] != 1 or z.shape[1] != 1:
        raise ShapeError(f"encode_frame expects (1,1,h,w), got {z.shape}")
    v = model.side_info(Tensor(z)).data
    v_hat = quantize(v)
    mu_v, sigma_v = model.prior_params(v_hat.shape)
    v_bs = encode_tensor(v_hat, mu_v.data, sigma_v.data, camera_id=camera_id,
                         frame_index=frame_index, tau=model.tau,
                         model_revision=model_revision)
    mu_z, sigma_z = model.conditional_params(Tensor(v_hat.astype(np.float64)),
                                             z.shape[2], z.shape[3])
    z_hat = quantize(z)
    z_bs = encode_tensor(z_hat, mu_z.data, sigma_z.data, camera_id=camera_id,
                         frame_index=frame_index, tau=model.tau,
                         model_revision=model_revision)
    return FrameEncodeResult(
        stream=FrameBitstream(camera_id=camera_id, frame_index=frame_index,
                              v_stream=v_bs, z_stream=z_bs),
        z_hat=z_hat, v_hat=v_hat,
        z_bits_estimate=rate_estimate_bits(z_hat, mu_z.data, sigma_z.data),
        v_bits_estimate=rate_estimate_bits(v_hat, mu_v.data, sigma_v.data))


def decode_frame(fbs: FrameBitstream, model: EntropyModel) -> np.ndarray:
    """Recover the quantized latent: V first, then Z under Theta_con(V)."""
    mu_v, sigma_v = model.prior_params(fbs.v_stream.shape)
    v_hat = decode_tensor(fbs.v_stream, mu_v.data, sigma_v.data)
    h, w = fbs.z_stream.shape[2], fbs.z_stream.shape[3]
    mu_z, sigma_z = model.conditional_params(Tensor(v_hat.astype(np.float64)), h, w)
    return decode_tensor(fbs.z_stream, mu_z.data, sigma_z.data)
