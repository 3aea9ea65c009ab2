"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an op keeps a reference to its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "symdepth_grad_enabled", default=True
)
# op name -> multiplier applied to that op's input gradients (negative-control hook)
_backward_faults: contextvars.ContextVar[dict[str, float]] = contextvars.ContextVar(
    "symdepth_backward_faults", default={}
)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str, index: tuple[int, ...] | None = None):
        self.op = op
        self.index = index
        where = f" at index {index}" if index is not None else ""
        super().__init__(f"non-finite value produced by '{op}'{where}")


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the gradients emitted by ``op``'s backward rule. Test hook only."""
    faults = dict(_backward_faults.get())
    faults[op] = factor
    token = _backward_faults.set(faults)
    try:
        yield
    finally:
        _backward_faults.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("constructor", _first_bad(arr))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        faults = _backward_faults.get()
        for node in reversed(build_tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            factor = faults.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --------------------------------------------------------------- operators
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _first_bad(arr: np.ndarray) -> tuple[int, ...] | None:
    bad = np.argwhere(~np.isfinite(arr))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, _first_bad(np.asarray(data)))
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
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


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "pow",
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    with np.errstate(over="ignore"):  # a**2 -> inf still gives pdf 0
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data**2)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def activation(a, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation '{kind}'")


# ------------------------------------------------------------------- reductions
def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape changes
def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def take_rows(table, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0; ``index`` may have any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.data[index], (table,), backward, "take_rows")


# ----------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {c}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as NonFiniteError
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------- spatial
def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same", groups: int = 1) -> Tensor:
    """2-D cross-correlation on NHWC input with an HWIO kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    kh, kw, cin_g, cout = kernel.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"channels in={cin}/out={cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"kernel expects {cin_g} input channels per group, input gives {cin // groups}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel dims")
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"'valid' conv needs input {h}x{w} >= kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding '{padding}'")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cout_g = cout // groups
    # [kh, kw, groups, cin_g, cout_g]
    kg = kernel.data.reshape(kh, kw, cin_g, groups, cout_g).transpose(0, 1, 3, 2, 4)
    out = np.zeros((b, ho, wo, groups, cout_g))
    patches = {}
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            sl = sl.reshape(b, ho, wo, groups, cin_g)
            patches[i, j] = sl
            out += np.einsum("bhwgc,gcd->bhwgd", sl, kg[i, j], optimize=True)
    out = out.reshape(b, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gg = g.reshape(b, ho, wo, groups, cout_g)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kg)
        for i in range(kh):
            for j in range(kw):
                gk[i, j] = np.einsum("bhwgc,bhwgd->gcd", patches[i, j], gg, optimize=True)
                contrib = np.einsum("bhwgd,gcd->bhwgc", gg, kg[i, j], optimize=True)
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += contrib.reshape(
                    b, ho, wo, cin
                )
        gx = gxp[:, pt : pt + h, pl : pl + w, :]
        gkernel = gk.transpose(0, 1, 3, 2, 4).reshape(kernel.shape)
        grads = [gx, gkernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def bilinear_matrix(size: int, scale: int) -> np.ndarray:
    """Interpolation matrix [scale*size, size], align_corners=False."""
    m = np.zeros((size * scale, size))
    for dst in range(size * scale):
        src = max((dst + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m


def upsample_bilinear(x, scale: int) -> Tensor:
    x = as_tensor(x)
    if scale not in (2, 4):
        raise ValueError(f"upsample scale must be 2 or 4, got {scale}")
    if x.ndim != 4:
        raise ShapeError(f"upsample expects [B,H,W,C], got {x.shape}")
    mh = bilinear_matrix(x.shape[1], scale)
    mw = bilinear_matrix(x.shape[2], scale)
    out = np.einsum("ih,bhwc,jw->bijc", mh, x.data, mw, optimize=True)
    return _make(
        out,
        (x,),
        lambda g: (np.einsum("ih,bijc,jw->bhwc", mh, g, mw, optimize=True),),
        "upsample_bilinear",
    )


# ------------------------------------------------------------------ parameters
def trunc_normal(rng: np.random.Generator, shape: Iterable[int], std: float = 0.02) -> Tensor:
    """Normal(0, std) samples truncated at +-2 std by redrawing, as a trainable leaf."""
    shape = tuple(shape)
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return Tensor(vals, requires_grad=True)


def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)
