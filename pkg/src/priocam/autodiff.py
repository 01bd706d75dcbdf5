"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each forward op records a backward closure on the output tensor; calling
``backward()`` on a scalar replays the recorded tape in reverse topological
order. The graph is rebuilt per forward pass and garbage-collected with it.
Only the broadcasting the rest of the package needs is supported.
"""

from __future__ import annotations

import math
import zipfile
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError, DomainError, ShapeError, TrainingError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; every overload routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data

    def backward(g):
        _accum(a, 2.0 * g * a.data)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x) computed without overflow on either tail
    out_data = np.logaddexp(0.0, a.data)
    sig = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * sig)

    return _make(out_data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def clip_upper(a, cap: float) -> Tensor:
    """min(a, cap); gradient flows only where a < cap."""
    a = as_tensor(a)
    mask = a.data < cap
    out_data = np.where(mask, a.data, cap)

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    out_data = np.where(mask, a.data, lo)

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions, shaping, linear algebra
# ---------------------------------------------------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmax(a) -> Tensor:
    """Max over all elements; subgradient routes to the first argmax."""
    a = as_tensor(a)
    idx = int(np.argmax(a.data))
    out_data = np.asarray(a.data.reshape(-1)[idx])

    def backward(g):
        buf = np.zeros_like(a.data).reshape(-1)
        buf[idx] = float(g)
        _accum(a, buf.reshape(a.shape))

    return _make(out_data, (a,), backward)


def pick(a, idx: int) -> Tensor:
    """Select element idx of a 1D tensor as a scalar; one-hot gradient."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"pick expects a 1D tensor, got shape {a.shape}")
    if not (0 <= idx < a.data.size):
        raise DomainError(f"index {idx} out of range for size {a.data.size}")
    out_data = np.asarray(a.data[idx])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = float(g)
        _accum(a, buf)

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def depth_to_space(x, block: int = 2) -> Tensor:
    """Rearrange (N, C*b*b, h, w) into (N, C, h*b, w*b).

    Each output position within a b x b cell gets its own input channel,
    so learned upsampling keeps sub-cell phase information that a plain
    nearest-neighbor expansion would erase.
    """
    x = as_tensor(x)
    n, c_full, h, w = x.data.shape
    if c_full % (block * block) != 0:
        raise ShapeError(
            f"channel count {c_full} not divisible by block^2 = {block * block}")
    c = c_full // (block * block)
    t = reshape(x, (n, c, block, block, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (n, c, h * block, w * block))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(out_data, tuple(parts), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1D/2D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.data.ndim == 2 and b.data.ndim == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        elif a.data.ndim == 1 and b.data.ndim == 2:
            _accum(a, g @ b.data.T)
            _accum(b, np.outer(a.data, g))
        elif a.data.ndim == 1 and b.data.ndim == 1:
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def linear_forward(x, weight, bias) -> Tensor:
    """weight @ x + bias for a vector input."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2 or x.data.ndim != 1:
        raise ShapeError(f"linear expects W[m,n] and x[n], got {weight.shape}, {x.shape}")
    if weight.data.shape[1] != x.data.shape[0] or weight.data.shape[0] != bias.data.shape[0]:
        raise ShapeError(
            f"linear shape mismatch: W{weight.shape} x{x.shape} b{bias.shape}")
    return add(matmul(weight, x), bias)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution via im2col. x: (N,C,H,W), weight: (F,C,kh,kw), bias: (F,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FCHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, weight C={cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]            # (N,C,ho,wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out_data = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        _accum(bias, gmat.sum(axis=0))
        _accum(weight, (gmat.T @ cols).reshape(f, c, kh, kw))
        if x.requires_grad:
            gcols = gmat @ wmat                          # (N*ho*wo, C*kh*kw)
            gcols = gcols.reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:hp - padding, padding:wp - padding]
            _accum(x, gx)

    return _make(out_data, (x, weight, bias), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsample of (N,C,H,W)."""
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        _accum(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def pad2d_rb(x, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom/right spatial edges of (N,C,H,W)."""
    x = as_tensor(x)
    out_data = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    n, c, h, w = x.data.shape

    def backward(g):
        _accum(x, g[:, :, :h, :w])

    return _make(out_data, (x,), backward)


def crop2d(x, h: int, w: int) -> Tensor:
    """Crop the trailing spatial dims of (N,C,H,W) to (h,w)."""
    x = as_tensor(x)
    out_data = x.data[:, :, :h, :w]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h, :w] = g
        _accum(x, gx)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# fused ops with analytic gradients
# ---------------------------------------------------------------------------

def softmax(p) -> Tensor:
    """Stable softmax over a 1D score vector."""
    p = as_tensor(p)
    if p.data.ndim != 1 or p.data.size == 0:
        raise DomainError(f"softmax expects a non-empty 1D vector, got shape {p.shape}")
    if not np.all(np.isfinite(p.data)):
        raise DomainError("softmax input must be finite")
    shifted = p.data - p.data.max()
    e = np.exp(shifted)
    out_data = e / e.sum()

    def backward(g):
        _accum(p, out_data * (g - float(g @ out_data)))

    return _make(out_data, (p,), backward)


def gaussian_log_likelihood(x, mu, sigma) -> Tensor:
    """Sum of elementwise log N(x; mu, sigma^2) in nats."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise DomainError("gaussian_log_likelihood requires sigma > 0")
    d = x.data - mu.data
    var = sigma.data * sigma.data
    terms = -0.5 * np.log(2.0 * np.pi * var) - d * d / (2.0 * var)
    out_data = np.asarray(terms.sum())

    def backward(g):
        g = float(g)
        dmu = g * d / var
        _accum(x, _unbroadcast(-dmu, x.shape))
        _accum(mu, _unbroadcast(dmu, mu.shape))
        _accum(sigma, _unbroadcast(g * (d * d / (var * sigma.data) - 1.0 / sigma.data),
                                   sigma.shape))

    return _make(out_data, (x, mu, sigma), backward)


def box_prob(y, mu, sigma, width: float = 1.0) -> Tensor:
    """P(bin of `width` centered on y) under N(mu, sigma^2), elementwise.

    This is the unit-box-convolved Gaussian density used as the
    differentiable stand-in for the discrete coder pmf.
    """
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise DomainError("box_prob requires sigma > 0")
    half = 0.5 * width
    hi = (y.data - mu.data + half) / sigma.data
    lo = (y.data - mu.data - half) / sigma.data
    out_data = ndtr(hi) - ndtr(lo)

    def backward(g):
        phi_hi = _INV_SQRT_2PI * np.exp(-0.5 * hi * hi)
        phi_lo = _INV_SQRT_2PI * np.exp(-0.5 * lo * lo)
        dedge = (phi_hi - phi_lo) / sigma.data
        _accum(y, _unbroadcast(g * dedge, y.shape))
        _accum(mu, _unbroadcast(-g * dedge, mu.shape))
        _accum(sigma, _unbroadcast(-g * (phi_hi * hi - phi_lo * lo) / sigma.data,
                                   sigma.shape))

    return _make(out_data, (y, mu, sigma), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Summed Bernoulli cross-entropy in nats, computed from logits."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    terms = np.maximum(x, 0.0) - x * t + np.logaddexp(0.0, -np.abs(x))
    out_data = np.asarray(terms.sum())
    sig = _sigmoid_np(x)

    def backward(g):
        _accum(logits, float(g) * (sig - t))

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# parameter sets, checkpoints, gradient checking
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> parameter Tensor map with matching gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def update(self, other: "ParamSet") -> None:
        for name, t in other.items():
            if name in self._params:
                raise ConfigurationError(f"duplicate parameter name: {name}")
            self._params[name] = t

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} != param {name} {t.data.shape}")
            t.data = arr.copy()

    def save(self, path) -> None:
        """Write a self-describing binary checkpoint (bit-exact round-trip)."""
        np.savez(path, **{name: t.data for name, t in self._params.items()})

    def load(self, path) -> None:
        try:
            with np.load(path) as npz:
                self.load_state_dict({k: npz[k] for k in npz.files})
        except (zipfile.BadZipFile, OSError) as e:
            raise ConfigurationError(f"unreadable checkpoint {path}: {e}") from e


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)).

    Keeps layer output variance near its input variance under ReLU, which
    small fixed-range draws do not; under-scaled encoders can start so quiet
    that quantization silences them before the task loss shapes anything.
    """
    if len(shape) < 2:
        raise ShapeError(f"he_uniform needs a weight shape (out, in, ...), got {shape}")
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def grad_check(f: Callable[[], Tensor], params: ParamSet, step: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` rebuilds the scalar loss from the current parameter values on every
    call. When `sample` is given, only that many randomly chosen scalar
    coordinates are checked (seeded through `rng`).
    """
    if not (1e-5 <= step <= 1e-2):
        raise DomainError(f"step {step} outside [1e-5, 1e-2]")
    params.zero_grad()
    out = f()
    if not np.isfinite(out.data):
        raise TrainingError("grad_check: non-finite loss")
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}

    coords = [(name, idx) for name, t in params.items() for idx in range(t.size)]
    if sample is not None and sample < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[int(i)] for i in chosen]

    max_err = 0.0
    for name, idx in coords:
        t = params[name]
        flat = t.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = float(f().data)
        flat[idx] = orig - step
        f_minus = float(f().data)
        flat[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise TrainingError(f"grad_check: non-finite loss at {name}[{idx}]")
        fd = (f_plus - f_minus) / (2.0 * step)
        g = analytic[name].reshape(-1)[idx]
        err = abs(fd - g) / max(1.0, abs(g))
        if err > max_err:
            max_err = err
    return max_err
