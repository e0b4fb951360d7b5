"""Small reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient (and grad mode is on) the result remembers its parents together with
a closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order.

Binary elementwise ops accept operands of identical shape, or one operand that
is a scalar (a Python number or a 0-d tensor).  Nothing else broadcasts; use
:func:`expand` or :meth:`Tensor.reshape` to line shapes up explicitly.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are invalid for an op."""


class GradientError(RuntimeError):
    """Backward pass or optimizer update cannot proceed."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)):
        if dtype is not None:
            return np.asarray(data).astype(dtype, copy=False)
        if data.dtype.kind == "f":
            return np.asarray(data)
        return np.asarray(data).astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- elementwise binary ------------------------------------------------------

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting; reshape or expand first)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")

    def bw(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), bw, "div")


# -- elementwise unary -------------------------------------------------------

def neg(x) -> Tensor:
    x = _wrap(x)
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = _wrap(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # split on sign so large |x| never overflows exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def abs_(x) -> Tensor:
    x = _wrap(x)
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is strictly inside."""
    x = _wrap(x)
    inside = (x.data > lo) & (x.data < hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-d matrix product, or batched product with identical leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape[-1]} vs {b.shape[-2]} (shapes {a.shape} @ {b.shape})")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree, {a.shape[:-2]} vs {b.shape[:-2]}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# -- structural --------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    x = _wrap(x)
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _record(out, (x,), lambda g: (g.sum(axis=0),), "expand")


def slice_(x, index) -> Tensor:
    x = _wrap(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record(np.array(out, copy=True), (x,), bw, "slice")


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(s != r for k, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if k != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ts[0].shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    expanded = []
    for t in ts:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = _wrap(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _record(out, (x,), bw, "upsample2x")


def detach(x) -> Tensor:
    return Tensor(_wrap(x).data)


# -- reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def amax(x, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = _wrap(x)
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _record(out, (x,), bw, "amax")


def max_spatial(x) -> Tensor:
    """Max over the two trailing (spatial) axes, ties to the smallest row-major index."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"max_spatial: need at least 2 dims, got {x.shape}")
    flat = reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    return amax(flat, -1)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


def l2norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``.  The subgradient at the origin is taken as 0."""
    x = _wrap(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return _record(out.astype(x.dtype), (x,), bw, "l2norm")


# -- convolution -------------------------------------------------------------

def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    ``x`` is (B, C, H, W) or (C, H, W); ``w`` is (O, C, kh, kw) with odd kernel
    sizes; ``b`` is an optional (O,) bias.
    """
    x, w = _wrap(x), _wrap(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,C,H,W) input and (O,C,kh,kw) kernel, got {x.shape} and {w.shape}")
    B, C, H, W = xd.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: kernel expects {Cw} input channels, input has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds spatial extent {H}x{W}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (B, C, H, W, kh, kw) -> (B, H*W, C*kh*kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, H * W, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(B, O, H, W)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    if unbatched:
        out = out[0]

    def bw(g):
        gd = g[None] if unbatched else g
        g2 = gd.reshape(B, O, H * W).transpose(0, 2, 1)  # (B, HW, O)
        gw = np.einsum("bpo,bpk->ok", g2, cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(B, H, W, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, ph:ph + H, pw:pw + W]
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record(out.astype(xd.dtype, copy=False), parents, bw, "conv2d")


# -- dispatch by name ----------------------------------------------------------

_OPS: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "softmax": softmax, "log_softmax": log_softmax, "relu": relu, "tanh": tanh,
    "sigmoid": sigmoid, "exp": exp, "log": log, "sqrt": sqrt, "abs": abs_,
    "neg": neg, "clamp": clamp, "mean": mean, "sum": sum_, "amax": amax,
    "conv2d": conv2d, "max_spatial": max_spatial, "slice": slice_, "reshape": reshape,
    "transpose": transpose, "expand": expand, "upsample2x": upsample2x, "l2norm": l2norm,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients are stored on ``.grad``.  When ``params`` is given the
    return value maps each parameter path to its gradient (zeros for
    parameters the loss does not reach); otherwise it maps the names of named
    leaves that received a gradient.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("non-differentiable loss: not a Tensor")
    if loss.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("non-differentiable loss: no tape reaches it")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is not None:
        return {path: (t.grad if t.grad is not None else np.zeros_like(t.data)) for path, t in params.items()}
    return {}


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- parameters and optimizer ------------------------------------------------

class ParamStore:
    """Named parameters plus Adam moment estimates."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        arr = np.array(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        t = Tensor(arr, requires_grad=True, name=path)
        self._params[path] = t
        self.m[path] = np.zeros_like(t.data)
        self.v[path] = np.zeros_like(t.data)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def keys(self):
        return self._params.keys()

    def values(self):
        return self._params.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for k, t in self._params.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {k!r}")
                continue
            if arrays[k].shape != t.shape:
                raise ShapeError(f"parameter {k!r}: stored shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def zero_grad(self) -> None:
        zero_grad(self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place.  Returns ``params``."""
    for path, g in grads.items():
        if path not in params:
            raise KeyError(f"gradient for unknown parameter {path!r}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {path!r}")
    b1, b2 = betas
    params.step += 1
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for path, t in params.items():
        g = grads.get(path)
        if g is None:
            g = np.zeros_like(t.data)
        m = params.m[path] = b1 * params.m[path] + (1.0 - b1) * g
        v = params.v[path] = b2 * params.v[path] + (1.0 - b2) * g * g
        t.data = (t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.dtype, copy=False)
    return params


# -- initialisers ------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)).astype(DEFAULT_DTYPE)


# -- finite differences --------------------------------------------------------

def numeric_grad(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                 eps: float = 1e-4, coords: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn`` w.r.t. each array (float64).

    ``coords`` optionally lists, per array, the flat indices to perturb;
    other entries are left as NaN.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for j, a in enumerate(arrays):
        g = np.full_like(a, np.nan) if coords is not None else np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in (range(flat.size) if coords is None else coords[j]):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(arrays)
            flat[i] = orig - eps
            lo = fn(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def gradcheck(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
              eps: float = 1e-4, rtol: float = 1e-3, atol: float = 1e-5,
              sample: int | None = None, rng: np.random.Generator | None = None) -> tuple[bool, float]:
    """Compare tape gradients of ``build`` against central differences in float64.

    ``build`` maps input tensors to a scalar tensor.  Returns ``(ok, worst)``
    where ``worst`` is the largest ``|analytic - numeric| - rtol*|numeric|``.
    With ``sample`` only that many randomly chosen scalar coordinates are
    differenced, and the directional derivative along a random unit vector
    over all coordinates is checked as well.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    def f(arrs):
        with no_grad():
            return float(build([Tensor(a) for a in arrs]).data)

    coords = None
    worst = -np.inf
    if sample is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [np.asarray(a).size for a in arrays]
        picks = rng.choice(sum(sizes), size=min(sample, sum(sizes)), replace=False)
        bounds = np.cumsum([0] + sizes)
        coords = [np.sort(picks[(picks >= lo) & (picks < hi)] - lo) for lo, hi in zip(bounds[:-1], bounds[1:])]
        base = [np.array(a, dtype=np.float64) for a in arrays]
        dirs = [rng.standard_normal(b.shape) for b in base]
        norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        hi = f([b + eps * d for b, d in zip(base, dirs)])
        lo = f([b - eps * d for b, d in zip(base, dirs)])
        num_dir = (hi - lo) / (2 * eps)
        ana_dir = float(sum((a * d).sum() for a, d in zip(analytic, dirs)))
        worst = abs(ana_dir - num_dir) - rtol * abs(num_dir)
    numeric = numeric_grad(f, arrays, eps, coords)
    for a, n in zip(analytic, numeric):
        known = ~np.isnan(n)
        if known.any():
            worst = max(worst, float(np.max(np.abs(a[known] - n[known]) - rtol * np.abs(n[known]))))
    return worst <= atol, worst
