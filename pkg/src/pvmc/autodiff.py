"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation builds a node holding references to its
inputs and a rule mapping the output gradient to input gradients.
``Tensor.backward`` walks the graph in reverse topological order, visiting
each node exactly once.

Broadcasting is restricted to scalar/tensor pairs; anything else needs an
explicit :func:`broadcast_to`. Reductions go through numpy's fixed-order
pairwise summation, so forward and backward passes are bit-reproducible.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GraphError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "default_dtype",
    "set_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "square",
    "sqrt",
    "abs",
    "exp",
    "log",
    "relu",
    "reshape",
    "broadcast_to",
    "concat",
    "extract_patches",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from non-float data (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """N-dimensional value buffer with an optional gradient and backprop record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""
        self.name = name

    # -- introspection -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- backprop ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Repeated calls accumulate; clear with ``zero_grad``.
        """
        if grad is None:
            if self.data.ndim != 0:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones((), dtype=self.dtype)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise UsageError("seed gradient must match the tensor shape")
        if not self.requires_grad:
            raise UsageError("tensor is not connected to any parameter requiring grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None and np.isscalar(value):
        dtype = _DEFAULT_DTYPE
    return Tensor(value, dtype=dtype)


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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise GraphError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=ref.dtype))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=ref.dtype))
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise GraphError(f"shape mismatch {a.shape} vs {b.shape}; use broadcast_to explicitly")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar operands are ever broadcast
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # subgradient at 0 is 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims) / count, dtype=a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise GraphError(str(exc)) from None
    lead = len(shape) - a.ndim
    expanded = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        gs = g.sum(axis=expanded, keepdims=True) if expanded else g
        if lead:
            gs = gs.reshape(gs.shape[lead:])
        return (gs.reshape(a.shape),)

    return _make(np.ascontiguousarray(out), (a,), backward, "broadcast_to")


def _slice(a: Tensor, key) -> Tensor:
    key = key if isinstance(key, tuple) else (key,)
    if any(not isinstance(k, (slice, int, type(Ellipsis))) for k in key):
        raise GraphError("only basic slicing is differentiable; use extract_patches for gathers")
    out = a.data[key]

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[key] = g
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise GraphError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise GraphError(f"concat shape mismatch {ref} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), backward, "concat")


def patch_flat_indices(image_shape, starts, size) -> np.ndarray:
    """Flat indices of rectangular patches, shape (P, s_y*s_x).

    ``image_shape`` is the full tensor shape; the last two axes are (rows, cols).
    Each start is ``(lead_index, y0, x0)`` where ``lead_index`` is the flat index
    over the leading axes (0 for a plain 2-D image).
    """
    sy, sx = size
    h, w = image_shape[-2], image_shape[-1]
    starts = np.asarray(starts, dtype=np.int64).reshape(-1, 3)
    rows = np.arange(sy)[:, None] * w
    cols = np.arange(sx)[None, :]
    local = (rows + cols).ravel()
    base = starts[:, 0] * (h * w) + starts[:, 1] * w + starts[:, 2]
    return base[:, None] + local[None, :]


def extract_patches(a: Tensor, starts, size) -> Tensor:
    """Gather rectangular patches into a (P, S) tensor."""
    sy, sx = size
    h, w = a.shape[-2], a.shape[-1]
    starts_arr = np.asarray(starts, dtype=np.int64).reshape(-1, 3)
    n_lead = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    if (
        np.any(starts_arr[:, 1] < 0)
        or np.any(starts_arr[:, 2] < 0)
        or np.any(starts_arr[:, 1] + sy > h)
        or np.any(starts_arr[:, 2] + sx > w)
        or np.any(starts_arr[:, 0] < 0)
        or np.any(starts_arr[:, 0] >= n_lead)
    ):
        raise GraphError("patch extends outside the tensor")
    idx = patch_flat_indices(a.shape, starts_arr, size)
    flat = a.data.reshape(-1)
    out = flat[idx]

    def backward(g):
        full = np.bincount(idx.ravel(), weights=g.ravel(), minlength=flat.size)
        return (full.astype(a.dtype).reshape(a.shape),)

    return _make(out, (a,), backward, "extract_patches")


# ---------------------------------------------------------------------------
# convolutional layers, channels-last (N, H, W, C) layout
# ---------------------------------------------------------------------------
def _check_nhwc(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise GraphError(f"{what} expects an (N, H, W, C) tensor, got {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(N, H+k-1, W+k-1, C) padded input -> (N*H*W, k*k*C) patch matrix."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else a


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with an odd square kernel.

    ``x`` is (N, H, W, C_in); ``weight`` is (K, K, C_in, C_out).
    """
    _check_nhwc(x, "conv2d")
    n, h, w, c = x.shape
    kh, kw, ci, o = weight.shape
    if ci != c:
        raise GraphError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if kh != kw or kh % 2 == 0:
        raise GraphError("conv2d needs an odd square kernel for 'same' padding")
    if bias is not None and bias.shape != (o,):
        raise GraphError(f"bias shape {bias.shape} != ({o},)")
    k = kh
    pad = k // 2
    cols = _im2col(_pad_hw(x.data, pad), k, h, w)
    wmat = weight.data.reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, o)

    def backward(g):
        go = g.reshape(n * h * w, o)
        gw = (cols.T @ go).reshape(weight.shape) if weight.requires_grad else None
        gb = go.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = 'same' correlation of g with the spatially flipped, channel-swapped kernel
            w_rot = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * o, c)
            gx = (_im2col(_pad_hw(g, pad), k, h, w) @ w_rot).reshape(n, h, w, c)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (exact 2x upsampling).

    ``x`` is (N, H, W, C_in); ``weight`` is (2, 2, C_in, C_out); output is (N, 2H, 2W, C_out).
    """
    _check_nhwc(x, "conv_transpose2d")
    n, h, w, c = x.shape
    kh, kw, ci, o = weight.shape
    if ci != c:
        raise GraphError(f"conv_transpose2d channel mismatch: input {c}, kernel {ci}")
    if (kh, kw) != (2, 2):
        raise GraphError("conv_transpose2d supports 2x2 kernels with stride 2 only")
    if bias is not None and bias.shape != (o,):
        raise GraphError(f"bias shape {bias.shape} != ({o},)")
    xm = x.data.reshape(n * h * w, c)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(c, 4 * o)
    y = (xm @ wmat).reshape(n, h, w, 2, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, o)
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(y)

    def backward(g):
        gm = g.reshape(n, h, 2, w, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * w, 4 * o)
        gw = (xm.T @ gm).reshape(c, 2, 2, o).transpose(1, 2, 0, 3) if weight.requires_grad else None
        gx = (gm @ wmat.T).reshape(n, h, w, c) if x.requires_grad else None
        gb = g.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, np.ascontiguousarray(gw) if gw is not None else None, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv_transpose2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over (N, H, W, C); ties route the gradient to the first maximum."""
    _check_nhwc(x, "maxpool2d")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise GraphError(f"maxpool2d needs even spatial dims, got {(h, w)}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")
