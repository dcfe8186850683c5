"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Ops build a computation graph out of
closures; ``backward`` walks it in reverse topological order. Only float
dtypes participate (float64 is the reference precision, float32 is a
runtime mode). Tensors produced by ops are treated as immutable; optimizer
steps mutate leaf parameters in place.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "randn",
    "matmul",
    "concat",
    "narrow",
    "softmax_rows",
    "layer_norm",
    "cross_entropy_smoothed",
    "dropout",
    "im2col3x3",
    "backward",
    "finite_diff_check",
    "make_rng",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent counter-based (Philox) random stream.

    ``path`` selects a substream, so e.g. every episode can own a stream
    derived from (seed, trial, episode) that does not depend on execution
    order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array of real scalars with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "frozen", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.frozen = False
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    # -- gradient plumbing ----------------------------------------------

    def detach(self) -> "Tensor":
        """Same storage, no graph participation."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other, self.dtype)
        return mul(self, pow_const(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_coerce(other, self.dtype), pow_const(self, -1.0))

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self.dtype))

    def t(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, scale: float = 1.0,
          dtype=np.float64, requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make_out(data: np.ndarray, parents: tuple[Tensor, ...],
              backward_fn: Callable[["Tensor"], Callable[[], None]]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward_fn(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # grad buffers are never mutated in place, so aliasing is safe
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + np.asarray(g, dtype=t.data.dtype)


# -- elementwise ops ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, out.grad)
            _accum(b, out.grad)
        return fn
    return _make_out(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, -out.grad)
        return fn
    return _make_out(-a.data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, b.data * out.grad)
            _accum(b, a.data * out.grad)
        return fn
    return _make_out(a.data * b.data, (a, b), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, p * a.data ** (p - 1.0) * out.grad)
        return fn
    return _make_out(a.data ** p, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(out):
        def fn():
            _accum(a, mask * out.grad)
        return fn
    return _make_out(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(out):
        def fn():
            _accum(a, y * out.grad)
        return fn
    return _make_out(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, out.grad / a.data)
        return fn
    return _make_out(np.log(a.data), (a,), bw)


# -- shape ops -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(out):
        def fn():
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)
        return fn
    return _make_out(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got shape {a.shape}")

    def bw(out):
        def fn():
            _accum(a, out.grad.T)
        return fn
    return _make_out(a.data.T.copy(), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out):
        def fn():
            _accum(a, out.grad.reshape(a.data.shape))
        return fn
    return _make_out(a.data.reshape(shape), (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range on axis {axis} of shape {a.shape}")
    slicer = tuple(slice(start, start + length) if i == axis else slice(None)
                   for i in range(a.ndim))

    def bw(out):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[slicer] = out.grad
                _accum(a, g)
        return fn
    return _make_out(a.data[slicer].copy(), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    if not parts:
        raise ShapeError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in parts], axis=axis)
    extents = [t.shape[axis] for t in parts]

    def bw(out):
        def fn():
            offset = 0
            for t, ext in zip(parts, extents):
                slicer = tuple(slice(offset, offset + ext) if i == axis else slice(None)
                               for i in range(t.ndim))
                _accum(t, out.grad[slicer])
                offset += ext
        return fn
    return _make_out(data, parts, bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(out):
        def fn():
            g = out.grad
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % a.ndim for ax in axes):
                    g = np.expand_dims(g, axis=ax)
            _accum(a, np.broadcast_to(g, a.data.shape))
        return fn
    return _make_out(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


# -- fused neural-net ops ---------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows requires a 2-D tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def fn():
            g = out.grad
            dot = (g * s).sum(axis=1, keepdims=True)
            _accum(x, s * (g - dot))
        return fn
    return _make_out(s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm requires a 2-D tensor, got shape {x.shape}")
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match row width {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bw(out):
        def fn():
            g = out.grad
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=1, keepdims=True)
                m2 = (gx * xhat).mean(axis=1, keepdims=True)
                _accum(x, inv * (gx - m1 - xhat * m2))
        return fn
    return _make_out(out_data, (x, gamma, beta), bw)


def cross_entropy_smoothed(logits: Tensor, labels: np.ndarray, epsilon: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over rows of ``logits``.

    The target distribution puts 1-epsilon on the true class and
    epsilon/(C-1) on every other class.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy requires 2-D logits, got shape {logits.shape}")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing epsilon must be in [0, 1), got {epsilon}")
    n, num_classes = logits.shape
    if num_classes < 2:
        raise ShapeError(f"cross_entropy requires >= 2 classes, got logits shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits rows {n}")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(
            f"label {int(labels[i])} at index {i} out of range [0, {num_classes})")
    labels = labels.astype(np.intp)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full((n, num_classes), epsilon / (num_classes - 1), dtype=logits.dtype)
    q[np.arange(n), labels] = 1.0 - epsilon
    loss = -(q * logp).sum() / n

    def bw(out):
        def fn():
            softmax = np.exp(logp)
            _accum(logits, (softmax - q) * (out.grad / n))
        return fn
    return _make_out(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def dropout(x: Tensor, rate: float, train_mode: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with probability ``rate`` and rescale survivors.

    Identity in eval mode. ``rng`` is required in train mode with rate > 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)

    def bw(out):
        def fn():
            _accum(x, keep * out.grad)
        return fn
    return _make_out(x.data * keep, (x,), bw)


# -- 3x3 convolution support -------------------------------------------------

def im2col3x3(x: Tensor) -> Tensor:
    """Unfold zero-padded 3x3 neighborhoods of a (B, H, W, C) tensor into
    rows, producing (B*H*W, 9*C). Column order is (ky, kx, channel)."""
    if x.ndim != 4:
        raise ShapeError(f"im2col3x3 requires a (B, H, W, C) tensor, got shape {x.shape}")
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x.data
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)

    def bw(out):
        def fn():
            if x.requires_grad:
                # each kernel tap contributes one shifted copy of the
                # output gradient; nine slice-adds invert the unfold
                dcols = out.grad.reshape(b, h, w, 3, 3, c)
                gpad = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
                for ky in range(3):
                    for kx in range(3):
                        gpad[:, ky:ky + h, kx:kx + w, :] += dcols[:, :, :, ky, kx, :]
                _accum(x, gpad[:, 1:-1, 1:-1, :])
        return fn
    return _make_out(cols, (x,), bw)


# -- reverse pass -------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every reachable
    requires_grad tensor. Grads of non-participating tensors are untouched."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic Tensor -> scalar Tensor function (dropout
    in eval mode). The relative error denominator is max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"step size h must be positive, got {h}")
    base = x.data.astype(np.float64, copy=True)

    probe = Tensor(base.copy(), requires_grad=True)
    loss = f(probe)
    backward(loss)
    if probe.grad is None:
        analytic = np.zeros_like(base)
    else:
        analytic = probe.grad.astype(np.float64, copy=True)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        f_minus = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
