"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a contiguous float array; ops executed inside a ``Tape``
context record a backward closure per output. ``Tape.backward`` replays the
records in reverse and accumulates gradients into ``Tensor.grad``. There is
no broadcasting beyond "second operand matches the trailing shape of the
first" (enough for per-channel gains/biases), no GPU path, and no
higher-order derivatives.

Ops run in whatever float dtype the inputs carry: training uses float32,
gradient checks use float64.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NumericError(ArithmeticError):
    """Raised when an op encounters non-finite values it cannot handle."""


class Tensor:
    """Dense array node. ``grad`` is lazily allocated during backward."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


_STATE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of ops from one forward pass.

    Records are appended in execution (topological) order; backward walks
    them once, in reverse. Use one Tape per thread.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._prev
        return False

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of recorded inputs."""
        if seed is None:
            seed = np.ones_like(loss.data)
        if loss.grad is None:
            loss.grad = np.array(seed, dtype=loss.data.dtype, copy=True)
        else:
            loss.grad = loss.grad + seed
        for out, pull in reversed(self.records):
            if out.grad is None:
                continue
            pull(out.grad)


class no_grad:
    """Context that suppresses recording (teacher passes, plain inference)."""

    def __enter__(self):
        self._prev = _active_tape()
        _STATE.tape = None
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._prev
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], pull: Callable) -> Tensor:
    """Create the output node and record ``pull`` if grads are needed."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, pull))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_trailing(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over the leading axes broadcast against ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_trailing(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if len(b.shape) <= len(a.shape) and a.shape[len(a.shape) - len(b.shape):] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "add")

    def pull(g):
        _accum(a, g)
        _accum(b, _sum_to_trailing(g, b.shape))

    return _result(a.data + b.data, (a, b), pull)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "sub")

    def pull(g):
        _accum(a, g)
        _accum(b, -_sum_to_trailing(g, b.shape))

    return _result(a.data - b.data, (a, b), pull)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "mul")

    def pull(g):
        _accum(a, g * b.data)
        _accum(b, _sum_to_trailing(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), pull)


def smul(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def pull(g):
        _accum(a, g * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), pull)


def sadd(a, s: float) -> Tensor:
    a = _as_tensor(a)

    def pull(g):
        _accum(a, g)

    return _result(a.data + np.asarray(float(s), dtype=a.dtype), (a,), pull)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {bd.shape}")

    def pull(g):
        _accum(a, g @ bd.T)
        gb = a.data.T @ g
        _accum(b, gb.T if transpose_b else gb)

    return _result(a.data @ bd, (a, b), pull)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, pull)


def gather(a, index) -> Tensor:
    """Select rows (axis 0) by integer index; repeated rows accumulate grads."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def pull(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _result(a.data[idx], (a,), pull)


# ---------------------------------------------------------------------------
# segment ops (keyed by fine-to-coarse parent index arrays)
# ---------------------------------------------------------------------------

def _segment_sum_data(x: np.ndarray, parent: np.ndarray, num: int) -> np.ndarray:
    out = np.zeros((num,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, parent, x)
    return out


def segment_mean(a, parent, num_segments: int, counts=None) -> Tensor:
    """Per-segment mean over rows. Every segment in [0, num_segments) must be hit."""
    a = _as_tensor(a)
    parent = np.asarray(parent, dtype=np.int64)
    if parent.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_mean: parent length {parent.shape[0]} != rows {a.shape[0]}")
    if counts is None:
        counts = np.bincount(parent, minlength=num_segments)
    counts = np.asarray(counts)
    if counts.min(initial=1) < 1 or len(counts) != num_segments:
        raise ValueError("segment_mean: every segment needs at least one member")
    inv = (1.0 / counts).astype(a.dtype)
    data = _segment_sum_data(a.data, parent, num_segments) * inv[:, None] if a.data.ndim == 2 \
        else _segment_sum_data(a.data, parent, num_segments) * inv

    def pull(g):
        scaled = g * inv[:, None] if g.ndim == 2 else g * inv
        _accum(a, scaled[parent])

    return _result(data, (a,), pull)


def segment_max(a, parent, num_segments: int) -> Tensor:
    """Per-segment max over rows; gradient routes to the first maximal row."""
    a = _as_tensor(a)
    parent = np.asarray(parent, dtype=np.int64)
    if parent.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_max: parent length {parent.shape[0]} != rows {a.shape[0]}")
    neg_inf = np.array(-np.inf, dtype=a.dtype)
    data = np.full((num_segments,) + a.shape[1:], neg_inf)
    np.maximum.at(data, parent, a.data)
    if np.isneginf(data).any():
        raise ValueError("segment_max: every segment needs at least one member")

    # winner[s, c] = smallest row index attaining the max of column c in segment s
    rows, cols = np.nonzero(a.data == data[parent])
    winner = np.full(data.shape, a.shape[0], dtype=np.int64)
    np.minimum.at(winner, (parent[rows], cols), rows)

    def pull(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        segs, chans = np.nonzero(winner < a.shape[0])
        np.add.at(buf, (winner[segs, chans], chans), g[segs, chans])
        _accum(a, buf)

    return _result(data, (a,), pull)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def pull(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, np.zeros((), dtype=a.dtype)), (a,), pull)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x), with Phi the standard normal CDF."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def pull(g):
        dens = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (phi + x * dens).astype(a.dtype))

    return _result((x * phi).astype(a.dtype), (a,), pull)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` to zero mean / unit variance (no affine part)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    y = (x - mu) * inv

    def pull(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    return _result(y, (a,), pull)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def pull(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _result(y, (a,), pull)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def pull(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), pull)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def pull(g):
        _accum(a, g * y)

    return _result(y, (a,), pull)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)

    def pull(g):
        # floor the denominator so zero-distance inputs stay finite
        _accum(a, g / (2.0 * np.maximum(y, np.asarray(1e-12, dtype=a.dtype))))

    return _result(y, (a,), pull)


def l2_normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = norm + np.asarray(eps, dtype=a.dtype)
    y = x / denom

    def pull(g):
        safe = np.maximum(norm, np.asarray(1e-12, dtype=a.dtype))
        inner = (g * x).sum(axis=axis, keepdims=True)
        _accum(a, g / denom - x * (inner / (denom * denom * safe)))

    return _result(y, (a,), pull)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)

    def pull(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype))

    return _result(a.data.sum(axis=axis), (a,), pull)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    scale = 1.0 / n

    def pull(g):
        if axis is None:
            _accum(a, np.broadcast_to(g * scale, a.shape).astype(a.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g * scale, axis), a.shape).astype(a.dtype))

    return _result(a.data.mean(axis=axis), (a,), pull)


def amin(a, axis: int) -> Tensor:
    """Min along an axis; gradient routes to the first minimal entry."""
    a = _as_tensor(a)
    idx = np.argmin(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def pull(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        grid = np.meshgrid(*[np.arange(s) for s in idx.shape], indexing="ij") if idx.ndim else []
        index = list(grid)
        index.insert(axis % a.data.ndim, idx)
        np.add.at(buf, tuple(index), g)
        _accum(a, buf)

    return _result(data, (a,), pull)


def amax(a, axis: int) -> Tensor:
    return smul(amin(smul(a, -1.0), axis), -1.0)


def mask_rows(base, mask, token: Tensor) -> Tensor:
    """Replace rows of ``base`` where ``mask`` is True with a learned row vector."""
    base = _as_tensor(base)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != base.shape[0]:
        raise ShapeError(f"mask_rows: mask length {mask.shape[0]} != rows {base.shape[0]}")
    if token.shape != base.shape[1:]:
        raise ShapeError(f"mask_rows: token shape {token.shape} != row shape {base.shape[1:]}")
    data = np.array(base.data, copy=True)
    data[mask] = token.data.astype(base.dtype)

    def pull(g):
        _accum(token, g[mask].sum(axis=0).astype(token.dtype))
        if base.requires_grad:
            gb = np.array(g, copy=True)
            gb[mask] = 0.0
            _accum(base, gb)

    return _result(data, (base, token), pull)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(fn, inputs: Sequence[Tensor], h: float = 1e-6, tol: float = 1e-6,
               max_coords: Optional[int] = None, rng=None) -> dict:
    """Compare tape gradients of a scalar function against central differences.

    ``fn`` receives the list of tensors and must return a scalar Tensor. When
    ``max_coords`` is set, a random subset of coordinates per input is probed
    (deterministic under ``rng``). Returns a report dict with ``max_rel_err``,
    ``failing_coordinate`` (input index, unraveled coordinate) and ``passed``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(inputs)
        if out.data.ndim != 0 and out.data.size != 1:
            raise ValueError("grad_check: function output must be scalar")
        tape.backward(out)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    worst = None
    checked = 0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords \
            else np.sort(rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(fn(inputs).data)
            flat[c] = orig - h
            fm = float(fn(inputs).data)
            flat[c] = orig
            fd = (fp - fm) / (2.0 * h)
            ad = float(grads[i].reshape(-1)[c])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (i, tuple(np.unravel_index(c, t.data.shape)))
    return {
        "max_rel_err": max_rel,
        "failing_coordinate": worst if max_rel > tol else None,
        "n_checked": checked,
        "passed": max_rel <= tol,
    }
