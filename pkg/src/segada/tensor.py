"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the four networks need are provided. Images and feature
maps are channel-first ``(C, H, W)`` arrays with no batch axis (batch size 1).

Recording happens on the active :class:`Tape`; outside a tape every op is a
plain numpy computation. A tensor takes part in differentiation when it is a
``requires_grad`` leaf or the output of a recorded op. Frozen parameters
(``requires_grad=False``) therefore never get a ``.grad`` of their own, but
gradients still flow *through* them to whatever tracked input fed them.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used by :func:`tensor` (64-bit for grad checks)."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, other)

    __rmul__ = __mul__

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad, name)


@dataclass
class _Record:
    op: str
    inputs: tuple
    needs: tuple
    backward: Callable
    out_shape: tuple


@dataclass
class Tape:
    """Ordered list of recorded ops; inputs always precede the ops consuming them."""

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording (used for detached forward passes)."""
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _check_finite(op: str, arr: np.ndarray, what: str = "output") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what} of {op}")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(op, out)
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    needs = tuple(t.tracked for t in inputs)
    if not any(needs):
        return result
    result.node_id = len(tape.records)
    result._tape = tape
    tape.records.append(_Record(op, tuple(inputs), needs, backward, out.shape))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate into any existing ``.grad``; callers reset them
    between optimizer steps. Consumed records are released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if loss.node_id is None or tape is None:
        raise ValueError("loss is detached: it was not produced by a recorded op")
    n = loss.node_id + 1
    grads: list = [None] * n
    grads[loss.node_id] = np.ones(loss.shape, dtype=loss.data.dtype)
    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        rec = tape.records[i]
        in_grads = rec.backward(g, rec.needs)
        for inp, need, gi in zip(rec.inputs, rec.needs, in_grads):
            if not need or gi is None:
                continue
            _check_finite(rec.op, gi, "gradient")
            if inp.node_id is not None and inp._tape is tape:
                j = inp.node_id
                grads[j] = gi if grads[j] is None else grads[j] + gi
            elif inp.requires_grad:
                if gi.shape != inp.data.shape:
                    raise RuntimeError(f"{rec.op}: gradient shape {gi.shape} != {inp.data.shape}")
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.clear()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit("add", a.data + np.asarray(b, dtype=a.data.dtype), (a,), lambda g, n: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g, n: (g * c,))


def sum_(a: Tensor) -> Tensor:
    return _emit(
        "sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
        lambda g, n: (np.full(a.shape, g, dtype=a.data.dtype),),
    )


def mean(a: Tensor) -> Tensor:
    size = a.data.size
    return _emit(
        "mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
        lambda g, n: (np.full(a.shape, g / size, dtype=a.data.dtype),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                 lambda g, n: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # derivative at exactly 0 is taken from the positive side (1.0)
    factor = np.where(x.data >= 0, 1.0, slope).astype(x.data.dtype)
    return _emit("leaky_relu", x.data * factor, (x,), lambda g, n: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g, n: (g * (1 - y * y),))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p), eval mode is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random stream")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    return _emit("dropout", x.data * mask, (x,), lambda g, n: (g * mask,))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, via im2col and one matmul."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be C x H x W, got shape {x.shape}")
    c_in, h, w = x.shape
    c_out, w_cin, k, k2 = weight.shape
    if w_cin != c_in:
        raise ValueError(f"conv2d: input channels {c_in} != weight input channels {w_cin}")
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {k}x{k2}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * pad:
        raise ValueError(f"conv2d: kernel height {k} exceeds padded input height {h + 2 * pad}")
    if k > w + 2 * pad:
        raise ValueError(f"conv2d: kernel width {k} exceeds padded input width {w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)

    if k == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(c_in, h * w)
    else:
        if pad:
            xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
            xp[:, pad:pad + h, pad:pad + w] = x.data
        else:
            xp = x.data
        cols = np.empty((c_in, k, k, ho, wo), dtype=x.data.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(c_in * k * k, ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def grad_fn(g, needs):
        g2 = g.reshape(c_out, -1)
        gx = gw = gb = None
        if needs[1]:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=1)
        if needs[0]:
            dcols = w2.T @ g2
            if k == 1 and stride == 1 and pad == 0:
                gx = dcols.reshape(c_in, h, w)
            else:
                dcols = dcols.reshape(c_in, k, k, ho, wo)
                dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                gx = dxp[:, pad:pad + h, pad:pad + w]
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, grad_fn)


# ---------------------------------------------------------------- resampling

_interp_cache: dict = {}


def bilinear_matrix(n: int, factor: int, dtype) -> np.ndarray:
    """Interpolation matrix (factor*n x n), half-pixel centres (align_corners=False).

    Output index o samples source coordinate (o + 0.5) / factor - 0.5, clamped
    at the borders, matching the usual align_corners=False convention.
    """
    key = (n, factor, np.dtype(dtype).str)
    if key not in _interp_cache:
        m = np.zeros((n * factor, n), dtype=np.float64)
        for o in range(n * factor):
            src = max((o + 0.5) / factor - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            lam = src - i0
            m[o, i0] += 1 - lam
            m[o, i1] += lam
        _interp_cache[key] = m.astype(dtype)
    return _interp_cache[key]


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

        def grad_fn(g, needs):
            return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    elif mode == "bilinear":
        uh = bilinear_matrix(h, factor, x.data.dtype)
        uw = bilinear_matrix(w, factor, x.data.dtype)
        out = uh @ x.data @ uw.T

        def grad_fn(g, needs):
            return (uh.T @ g @ uw,)

    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return _emit("upsample", np.ascontiguousarray(out), (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool needs a non-empty spatial map")
    area = h * w
    return _emit(
        "global_avg_pool", x.data.mean(axis=(1, 2)), (x,),
        lambda g, n: (np.broadcast_to((g / area)[:, None, None], x.shape).copy(),),
    )


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def pixelwise_cross_entropy(logits: Tensor, targets, ignore_id: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels of a K x H x W map.

    Returns an exact zero (with zero gradient) when every pixel is ignored.
    """
    k = logits.shape[0]
    t = np.asarray(targets).astype(np.int64)
    if t.shape != logits.shape[1:]:
        raise ValueError(f"cross entropy: label map {t.shape} != logits spatial {logits.shape[1:]}")
    valid = t != ignore_id
    bad = valid & ((t < 0) | (t >= k))
    if bad.any():
        raise ValueError(f"cross entropy: label id {int(t[bad][0])} outside 0..{k - 1}")
    z = logits.data.reshape(k, -1)
    tv = t.reshape(-1)
    vv = valid.reshape(-1)
    n = int(vv.sum())
    dtype = logits.data.dtype
    if n == 0:
        return _emit("cross_entropy", np.zeros((), dtype=dtype), (logits,),
                     lambda g, needs: (np.zeros(logits.shape, dtype=dtype),))
    lp = log_softmax(z, axis=0)
    cols = np.nonzero(vv)[0]
    loss = -lp[tv[cols], cols].sum() / n

    def grad_fn(g, needs):
        p = np.exp(lp)
        p[tv[cols], cols] -= 1
        p[:, ~vv] = 0
        return ((p * (g / n)).reshape(logits.shape).astype(dtype),)

    return _emit("cross_entropy", np.asarray(loss, dtype=dtype), (logits,), grad_fn)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at a == b is 0."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def grad_fn(g, needs):
        ga = sign * (g / n)
        return (ga, -ga)

    return _emit("l1_loss", np.asarray(np.abs(diff).mean(), dtype=a.data.dtype), (a, b), grad_fn)
