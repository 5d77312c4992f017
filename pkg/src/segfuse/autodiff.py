"""Dense float64 tensors with reverse-mode differentiation.

Deliberately small: exactly the operations the segmentation networks and
their training losses need, each with a hand-written backward rule, plus
the Adam update and a central-difference gradient checker that serves as
the independent oracle for every differentiable path in the package.

All data is float64 throughout. Graphs are built eagerly by the functions
below; calling ``backward()`` on a scalar result accumulates gradients
into every reachable tensor with ``requires_grad`` set. Wrap pure
inference in ``no_grad()`` so no graph is retained.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import NumericalError
from .rng import generator

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    @staticmethod
    def _from_op(data, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A constant view of this tensor's values, cut out of the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor; the name keys optimizer state and checkpoints."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data)
        self.tensor.requires_grad = True  # parameters are leaves even under no_grad

    @property
    def data(self) -> Array:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> Array | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _ensure(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_ensure(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _ensure(a)
    s = float(s)

    def backward(g):
        return (g * s if a.requires_grad else None,)

    return Tensor._from_op(a.data * s, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old) if a.requires_grad else None,)

    return Tensor._from_op(a.data.reshape(shape), (a,), backward)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    a = _ensure(a)

    def backward(g):
        return (g * (a.data > 0) if a.requires_grad else None,)

    return Tensor._from_op(np.maximum(a.data, 0.0), (a,), backward)


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at ``floor``.

    Where the clamp is active the derivative is 0 (the clamped value is
    constant in the input), which keeps gradients finite near 0.
    """
    a = _ensure(a)
    clamped = np.maximum(a.data, floor)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.where(a.data >= floor, g / clamped, 0.0),)

    return Tensor._from_op(np.log(clamped), (a,), backward)


def tsum(a: Tensor) -> Tensor:
    a = _ensure(a)

    def backward(g):
        return (np.full(a.data.shape, float(g)) if a.requires_grad else None,)

    return Tensor._from_op(a.data.sum(), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    a = _ensure(a)
    n = a.data.size

    def backward(g):
        return (np.full(a.data.shape, float(g) / n) if a.requires_grad else None,)

    return Tensor._from_op(a.data.mean(), (a,), backward)


def sum_axes(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), backward)


def mean_axes(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = 1
    for ax in axes:
        count *= _ensure(a).data.shape[ax]
    return scale(sum_axes(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlate an image stack with a square odd-sized kernel.

    x: [C_in, H, W] or [N, C_in, H, W]; kernel: [C_out, C_in, k, k].
    Output spatial size is (H + 2*padding - k) // stride + 1.
    """
    x, kernel = _ensure(x), _ensure(kernel)
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-D [C_out, C_in, k, k], got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got {x.shape}")
    n, c, h, w = xd.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    wmat = kernel.data.reshape(cout, cin * kh * kw)

    def _columns() -> Array:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * ho * wo, cin * kh * kw
        )

    out = (_columns() @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gg = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gg.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ _columns()).reshape(cout, cin, kh, kw)
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            g6 = gcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, cin, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += g6[
                        ..., ki, kj
                    ]
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
            if squeeze:
                gx = gx[0]
        return gx, gk

    return Tensor._from_op(out[0] if squeeze else out, (x, kernel), backward)


def _interp_matrix(src: int, dst: int) -> Array:
    """Row-interpolation matrix for align-corners bilinear resampling."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - i0
    rows = np.arange(dst)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Align-corners bilinear upsampling to ``size`` = (H, W).

    Corner pixels map exactly onto corner pixels; interior positions are
    spaced by (src-1)/(dst-1). Downsampling is rejected.
    """
    x = _ensure(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got {x.shape}")
    h, w = xd.shape[2], xd.shape[3]
    hh, ww = size
    if hh < h or ww < w:
        raise ValueError(f"target size {size} smaller than input {(h, w)}")
    rmat = _interp_matrix(h, hh)
    cmat = _interp_matrix(w, ww)
    out = np.matmul(np.matmul(rmat, xd), cmat.T)

    def backward(g):
        if not x.requires_grad:
            return (None,)
        gg = g[None] if squeeze else g
        gx = np.matmul(np.matmul(rmat.T, gg), cmat)
        return (gx[0] if squeeze else gx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), backward)


def softmax(logits: Tensor, axis: int = -3) -> Tensor:
    """Softmax along ``axis`` (default: the channel axis of [..,C,H,W])."""
    logits = _ensure(logits)
    if logits.data.shape[axis] < 2:
        raise ValueError("softmax needs at least 2 classes along the softmax axis")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Tensor._from_op(y, (logits,), backward)


def cross_entropy(
    pred: Tensor,
    target,
    ignore_mask=None,
    floor: float = 1e-12,
    class_weights=None,
) -> Tensor:
    """Mean negative log-probability of the target class over non-ignored pixels.

    pred: probability maps [C, H, W] or [N, C, H, W] (e.g. softmax output);
    target: integer label map [H, W] or [N, H, W]; ignore_mask: optional
    boolean map, True where a pixel should be excluded. Probabilities are
    clamped at ``floor`` before the log. ``class_weights`` (length C,
    nonnegative) reweights pixels by their target class; the loss is then
    the weighted mean, normalized by the summed weights of counted pixels.
    """
    pred = _ensure(pred)
    squeeze = pred.ndim == 3
    pd = pred.data[None] if squeeze else pred.data
    if pd.ndim != 4:
        raise ValueError(f"pred must be 3-D or 4-D, got {pred.shape}")
    t = np.asarray(target)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("target must be an integer label map")
    tt = t[None] if squeeze else t
    n, c, h, w = pd.shape
    if tt.shape != (n, h, w):
        raise ValueError(f"target shape {t.shape} does not match pred {pred.shape}")
    if tt.size and (tt.min() < 0 or tt.max() >= c):
        raise ValueError(f"target class id out of range [0, {c})")
    if ignore_mask is not None:
        im = np.asarray(ignore_mask, dtype=bool)
        im = im[None] if squeeze else im
        if im.shape != (n, h, w):
            raise ValueError("ignore_mask shape does not match target")
        valid = ~im
    else:
        valid = np.ones((n, h, w), dtype=bool)
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,):
            raise ValueError(f"class_weights must have shape ({c},), got {cw.shape}")
        if (cw < 0).any():
            raise ValueError("class_weights must be nonnegative")
        pixel_w = cw[tt]
    else:
        pixel_w = np.ones((n, h, w), dtype=np.float64)
    weight_total = float((pixel_w * valid).sum())
    picked = np.take_along_axis(pd, tt[:, None].astype(np.int64), axis=1)[:, 0]
    clamped = np.maximum(picked, floor)
    if weight_total <= 0.0:
        return Tensor._from_op(np.float64(0.0), (pred,), lambda g: (None,))
    loss = -(np.log(clamped) * valid * pixel_w).sum() / weight_total

    def backward(g):
        if not pred.requires_grad:
            return (None,)
        coeff = np.where(
            valid & (picked >= floor),
            -float(g) * pixel_w / (clamped * weight_total),
            0.0,
        )
        gp = np.zeros_like(pd)
        np.put_along_axis(gp, tt[:, None].astype(np.int64), coeff[:, None], axis=1)
        return (gp[0] if squeeze else gp,)

    return Tensor._from_op(np.float64(loss), (pred,), backward)


def shannon_entropy(p, axis: int = 0, tol: float = 1e-6) -> np.ndarray | float:
    """Shannon entropy in nats along ``axis``, with the 0*ln(0) = 0 convention.

    Plain numpy (not differentiable); validates that the input is a
    probability distribution along the axis.
    """
    arr = np.asarray(p, dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("negative probability component")
    sums = arr.sum(axis=axis)
    if np.abs(sums - 1.0).max() > tol:
        raise ValueError("probabilities must sum to 1 along the entropy axis")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(arr > 0, arr * np.log(np.maximum(arr, 1e-300)), 0.0)
    out = np.maximum(-terms.sum(axis=axis), 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter moment buffers (keyed by name)."""

    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[Array | None],
    state: AdamState,
) -> tuple[Sequence[Parameter], AdamState]:
    """One bias-corrected Adam update, applied in place.

    A None gradient is treated as zero (the moments still decay). Any
    non-finite gradient aborts with the offending parameter named.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    resolved = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{p.name}'")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{p.name}'")
        resolved.append((p, g))
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for p, g in resolved:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    samples: int = 30,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor; two evaluations that disagree are rejected. ``samples``
    coordinates are drawn (seeded) across all parameters; each is perturbed
    by +/- epsilon and compared against the gradient from backward().
    """
    first = float(loss_fn().data)
    second = float(loss_fn().data)
    if first != second:
        raise NumericalError("loss_fn is not deterministic: two evaluations differ")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }

    sizes = [p.data.size for p in params]
    total = sum(sizes)
    rng = generator(seed)
    chosen = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_index in sorted(int(i) for i in chosen):
        pi = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = flat_index - offsets[pi]
        p = params[pi]
        flat = p.data.reshape(-1)
        original = flat[local]
        flat[local] = original + epsilon
        up = float(loss_fn().data)
        flat[local] = original - epsilon
        down = float(loss_fn().data)
        flat[local] = original
        numeric = (up - down) / (2.0 * epsilon)
        ana = analytic[p.name].reshape(-1)[local]
        err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
