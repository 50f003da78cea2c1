# app/core/autodiff.py
"""
Dense tensors with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every op whose inputs require grad
appends a TapeEntry carrying a global sequence number, so execution order
is a valid topological order. backward(loss) gathers the reachable
entries, replays them in reverse and accumulates into leaf .grad arrays.

Ops on tensors that do not require grad record nothing, which is how
inference runs.
"""
import itertools
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from app.core.exceptions import NonFiniteError, PhaseKitError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

ARCCOS_EPS = 1e-7

_sequence = itertools.count()


class TapeEntry:
    """One executed op: inputs, output, backward rule, execution order."""

    __slots__ = ("op", "inputs", "output", "backward", "seq")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
                 backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.seq = next(_sequence)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_entry")
    # Make numpy defer mixed expressions (ndarray + Tensor) to our operators.
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[TapeEntry] = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, detail="only size-1 tensors convert to float")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- operators -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(op, inputs, out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a: ArrayLike, b: ArrayLike, fn) -> Tuple[Tensor, Tensor, np.ndarray]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            data = fn(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None
    return a, b, data


# ============================================================================
# Elementwise arithmetic
# ============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, data = _binary("add", a, b, np.add)
    return _emit("add", data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, data = _binary("sub", a, b, np.subtract)
    return _emit("sub", data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, data = _binary("mul", a, b, np.multiply)
    return _emit("mul", data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, data = _binary("div", a, b, np.divide)

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _emit("div", data, (a, b), backward)


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        data = np.power(x.data, exponent)
    return _emit("power", data, (x,), lambda g: (exponent * np.power(x.data, exponent - 1.0) * g,))


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from a where the constant mask holds, else from b."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("where", mask.shape, a.shape, b.shape) from None
    return _emit("where", data, (a, b),
                 lambda g: (unbroadcast(np.where(mask, g, 0.0), a.shape),
                            unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ============================================================================
# Linear algebra and shape ops
# ============================================================================

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def backward(g):
        return (unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape),
                unbroadcast(np.matmul(_swap_last(a.data), g), b.shape))

    return _emit("matmul", data, (a, b), backward)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Affine map x @ W + b over the last axis; W is (d_in, d_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatchError("linear", x.shape, weight.shape)
    data = x.data @ weight.data
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatchError("linear", weight.shape, bias.shape, detail="bias must be (d_out,)")
        data = data + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T
        x2 = x.data.reshape(-1, weight.shape[0])
        g2 = g.reshape(-1, weight.shape[1])
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", data, inputs, backward)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeMismatchError("transpose", x.shape, detail=f"axes {axes}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: ArrayLike, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from None
    return _emit("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[t.shape for t in tensors]) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("stack", *[t.shape for t in tensors]) from None

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _emit("stack", data, tensors, backward)


def getitem(x: ArrayLike, index) -> Tensor:
    """Slice or gather; gradients scatter-add back (repeated indices accumulate)."""
    x = as_tensor(x)
    try:
        data = x.data[index]
    except (IndexError, ValueError) as exc:
        raise ShapeMismatchError("getitem", x.shape, detail=str(exc)) from None

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(data, dtype=np.float64), (x,), backward)


def take(x: ArrayLike, indices: Sequence[int], axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    index = (slice(None),) * axis + (np.asarray(indices, dtype=np.int64),)
    return getitem(x, index)


def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(data), (x,), backward)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / max(count, 1))


# ============================================================================
# Elementwise transcendental functions
# ============================================================================

def _unary(op: str, x: ArrayLike, fn, dfn) -> Tensor:
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        data = fn(x.data)
    return _emit(op, data, (x,), lambda g: (dfn(x.data, data) * g,))


def sin(x): return _unary("sin", x, np.sin, lambda a, y: np.cos(a))
def cos(x): return _unary("cos", x, np.cos, lambda a, y: -np.sin(a))
def exp(x): return _unary("exp", x, np.exp, lambda a, y: y)
def log(x): return _unary("log", x, np.log, lambda a, y: 1.0 / a)
def sqrt(x): return _unary("sqrt", x, np.sqrt, lambda a, y: 0.5 / y)
def tanh(x): return _unary("tanh", x, np.tanh, lambda a, y: 1.0 - y * y)
def relu(x): return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0.0).astype(np.float64))


def erf(x):
    return _unary("erf", x, special.erf, lambda a, y: (2.0 / np.sqrt(np.pi)) * np.exp(-a * a))


def gelu(x):
    def fn(a):
        return 0.5 * a * (1.0 + special.erf(a / np.sqrt(2.0)))

    def dfn(a, y):
        cdf = 0.5 * (1.0 + special.erf(a / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
        return cdf + a * pdf

    return _unary("gelu", x, fn, dfn)


def arccos(x: ArrayLike, eps: float = ARCCOS_EPS) -> Tensor:
    """
    arccos whose gradient is taken at the argument clamped to [-1+eps, 1-eps].

    The value uses the argument clipped to [-1, 1], so identical rotations
    still measure exactly 0 and opposite ones exactly pi.
    """
    x = as_tensor(x)
    clamped = np.clip(x.data, -1.0 + eps, 1.0 - eps)
    data = np.arccos(np.clip(x.data, -1.0, 1.0))
    return _emit("arccos", data, (x,), lambda g: (-g / np.sqrt(1.0 - clamped * clamped),))


def atan2(y: ArrayLike, x: ArrayLike, dead_zone: float = 0.0) -> Tensor:
    """atan2(y, x); where hypot(x, y) < dead_zone the value is 0 with zero gradient."""
    y, x, data = _binary("atan2", y, x, np.arctan2)
    yb, xb = np.broadcast_arrays(y.data, x.data)
    r2 = xb * xb + yb * yb
    dead = r2 < dead_zone * dead_zone if dead_zone > 0.0 else np.zeros(r2.shape, dtype=bool)
    data = np.where(dead, 0.0, data)
    safe = np.where(dead, 1.0, r2)

    def backward(g):
        gy = np.where(dead, 0.0, g * xb / safe)
        gx = np.where(dead, 0.0, -g * yb / safe)
        return unbroadcast(gy, y.shape), unbroadcast(gx, x.shape)

    return _emit("atan2", data, (y, x), backward)


# ============================================================================
# Normalization, attention helpers, convolution
# ============================================================================

def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return _emit("layer_norm", y, (x,), backward)


def circular_conv1d(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """
    'Same'-length 1-D convolution with circular padding.

    x: (..., C_in, N); kernel: (C_out, C_in, K); bias: (C_out,).
    out[..., o, n] = sum_{i,k} kernel[o, i, k] * x[..., i, (n + k - K//2) mod N] + bias[o]
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-2] != kernel.shape[1]:
        raise ShapeMismatchError("circular_conv1d", x.shape, kernel.shape)
    n = x.shape[-1]
    k = kernel.shape[-1]
    index = (np.arange(n)[:, None] + np.arange(k)[None, :] - k // 2) % n  # (N, K)
    cols = x.data[..., index]  # (..., C_in, N, K)
    data = np.einsum("...ink,oik->...on", cols, kernel.data)
    inputs: Tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeMismatchError("circular_conv1d", kernel.shape, bias.shape, detail="bias must be (C_out,)")
        data = data + bias.data[:, None]
        inputs = (x, kernel, bias)

    def backward(g):
        gk = np.einsum("...on,...ink->oik", g, cols)
        gcols = np.einsum("...on,oik->...ink", g, kernel.data)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (Ellipsis, index), gcols)
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, g.shape[-2], g.shape[-1]).sum(axis=(0, 2))

    return _emit("circular_conv1d", data, inputs, backward)


# ============================================================================
# Tape and backward pass
# ============================================================================

class Tape:
    """Ordered record of the ops that produced a tensor, inputs before outputs."""

    def __init__(self, entries: List[TapeEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        if output._entry is None:
            return cls([])
        seen = {id(output._entry): output._entry}
        stack = [output._entry]
        while stack:
            entry = stack.pop()
            for t in entry.inputs:
                if t._entry is not None and id(t._entry) not in seen:
                    seen[id(t._entry)] = t._entry
                    stack.append(t._entry)
        return cls(sorted(seen.values(), key=lambda e: e.seq))

    def backward(self, loss: Tensor) -> None:
        grads = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._entry is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from loss."""
    if loss.size != 1:
        raise ShapeMismatchError("backward", loss.shape, detail="loss must be a scalar")
    if loss._entry is None:
        if not loss.requires_grad:
            raise PhaseKitError("backward called on a tensor that is not on a tape")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.record(loss).backward(loss)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = 1e-5) -> float:
    """
    Compare reverse-mode gradients of a scalar fn against central differences.

    Returns the worst relative error, max|analytic - numeric| / max|numeric|,
    over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += eps
            minus[i].reshape(-1)[j] -= eps
            f_plus = fn(*[Tensor(a) for a in plus]).item()
            f_minus = fn(*[Tensor(a) for a in minus]).item()
            flat[j] = (f_plus - f_minus) / (2.0 * eps)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        scale = max(np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
