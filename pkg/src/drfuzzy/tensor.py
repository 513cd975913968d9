"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the attention network, the losses and
Grad-CAM are provided. Broadcasting is deliberately narrow: a binary op
accepts equal shapes, a scalar, or an operand that broadcasts *into* the
other one (bias add, per-channel scaling). Mutual broadcasting is refused.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """N-d array node in a dynamically built differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable node that requires grad.

        Leaves that already hold a gradient make this an error: call
        ``zero_grad`` on them first. Intermediate nodes get their gradient
        recorded as well (Grad-CAM reads it from the cached feature map).
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad; nothing to differentiate")
        order = _topological_order(self)
        stale = [t for t in order if t.is_leaf and t.requires_grad and t.grad is not None]
        if stale:
            raise RuntimeError(
                f"{len(stale)} leaf tensor(s) already hold gradients; reset them with zero_grad() "
                "before calling backward again"
            )
        for t in order:
            if not t.is_leaf:
                t.grad = None
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    parents = tuple(parents)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    out = np.broadcast_shapes(a, b)
    if out not in (a, b):
        raise ValueError(f"{op}: shapes {a} and {b} need mutual broadcasting, which is not supported")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward)


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = x.data ** p

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _result(out, (x,), "pow", backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first
    and the clamped positions receive no gradient."""
    if floor is not None:
        clamped = x.data < floor
        arg = np.where(clamped, floor, x.data)
    else:
        clamped = None
        arg = x.data
    if np.any(arg <= 0):
        raise FloatingPointError("log of a non-positive value")

    def backward(g):
        gx = g / arg
        if clamped is not None:
            gx = np.where(clamped, 0.0, gx).astype(x.dtype, copy=False)
        return (gx,)

    return _result(np.log(arg), (x,), "log", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), "sum", backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(out, (x,), "getitem", backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.logaddexp(0.0, z).astype(x.dtype, copy=False)
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _result(out, (x,), "softplus", lambda g: ((g * sig).astype(x.dtype, copy=False),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), "softmax", backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), "log_softmax", backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape N x D and weight D x M."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense expects N x D input and D x M weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input has {x.shape[1]} features but weight expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, "dense", backward)


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        lo, hi = _same_padding(size, k, stride)
        size = size + lo + hi
    elif padding != "valid":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return (size - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d cross-correlation of N x C x H x W input with a K x C x kh x kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: kernel expects {kc} input channels, input has {c}")
    if stride < 1:
        raise ValueError("conv2d: stride must be a positive integer")
    if padding == "same":
        pt, pb = _same_padding(h, kh, stride)
        pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: N, C, Ho, Wo, kh, kw -> im2col matrix (N*Ho*Wo) x (C*kh*kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(k, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), "conv2d", backward)


def _check_map(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects an N x C x H x W map, got shape {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"{op}: empty spatial extent {x.shape[2:]}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_map(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _result(out, (x,), "global_avg_pool", backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max; ties send the gradient to the first
    maximum in row-major order."""
    _check_map(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _result(out, (x,), "global_max_pool", backward)


def channel_pool(x: Tensor) -> Tensor:
    """Stack of the channel-wise mean and max at every position: N x 2 x H x W."""
    _check_map(x, "channel_pool")
    n, c, h, w = x.shape
    idx = x.data.argmax(axis=1)
    mx = np.take_along_axis(x.data, idx[:, None], axis=1)
    out = np.concatenate([x.data.mean(axis=1, keepdims=True), mx], axis=1)

    def backward(g):
        gx = np.broadcast_to(g[:, :1] / c, x.shape).copy()
        gmax = np.zeros_like(x.data)
        np.put_along_axis(gmax, idx[:, None], g[:, 1:2], axis=1)
        return (gx + gmax,)

    return _result(out, (x,), "channel_pool", backward)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply every N x C map plane by the matching entry of an N x C gate."""
    if gate.shape != x.shape[:2]:
        raise ValueError(f"scale_channels: gate shape {gate.shape} != {x.shape[:2]}")
    return mul(x, reshape(gate, gate.shape + (1, 1)))


def squared_distances(x: Tensor, centers: Tensor) -> Tensor:
    """Squared Euclidean distance between each row of x (N x d) and each
    center (K x d): N x K."""
    if x.ndim != 2 or centers.ndim != 2 or x.shape[1] != centers.shape[1]:
        raise ValueError(f"squared_distances: incompatible shapes {x.shape} and {centers.shape}")
    diff = x.data[:, None, :] - centers.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def backward(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return _result(out, (x, centers), "squared_distances", backward)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
    elementwise: bool = False,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. Each input is perturbed
    in place, element by element. By default the error of one input is
    ``||a - b|| / max(||a||, ||b||, 1e-8)`` over its probed elements, which
    stays meaningful when some gradient entries are tiny; with
    ``elementwise=True`` it is the worst per-element ratio with denominator
    ``max(|a|, |b|, 1e-8)``. With ``sample`` set, only that many randomly
    chosen elements per input are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.data = np.array(t.data, copy=True, order="C")
        t.requires_grad = True
        t.zero_grad()
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t in inputs:
        t.zero_grad()
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            probe = np.arange(flat.size)
            if sample is not None and sample < flat.size:
                probe = np.random.default_rng(seed).choice(flat.size, sample, replace=False)
            numeric = np.empty(len(probe))
            for j, i in enumerate(probe):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * eps)
            exact = gflat[probe]
            if elementwise:
                denom = np.maximum(np.maximum(np.abs(numeric), np.abs(exact)), 1e-8)
                err = float(np.max(np.abs(numeric - exact) / denom)) if len(probe) else 0.0
            else:
                denom = max(np.linalg.norm(numeric), np.linalg.norm(exact), 1e-8)
                err = float(np.linalg.norm(numeric - exact) / denom)
            worst = max(worst, err)
    return worst
