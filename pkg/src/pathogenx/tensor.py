"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation lives in the ``OPS`` registry as a pair of
forward/backward rules. ``Tensor`` methods dispatch through the registry, so
the gradient-check harness can enumerate (and tests can sabotage) each rule
by name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "OPS",
    "tensor",
    "apply",
    "matmul",
    "concat",
    "concat_rows",
    "depthwise_conv2d",
    "layer_norm",
    "attention",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


@dataclass
class Op:
    name: str
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def register(name: str):
    def wrap(cls):
        OPS[name] = Op(name, cls.forward, cls.backward)
        return cls

    return wrap


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return apply("add", self, _lift(other))

    def __radd__(self, other):
        return apply("add", _lift(other), self)

    def __sub__(self, other):
        return apply("sub", self, _lift(other))

    def __rsub__(self, other):
        return apply("sub", _lift(other), self)

    def __mul__(self, other):
        return apply("mul", self, _lift(other))

    def __rmul__(self, other):
        return apply("mul", _lift(other), self)

    def __truediv__(self, other):
        return apply("div", self, _lift(other))

    def __rtruediv__(self, other):
        return apply("div", _lift(other), self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sqrt(self):
        return apply("sqrt", self)

    def relu(self):
        return apply("relu", self)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False):
        return apply("max", self, axis=axis, keepdims=keepdims)

    def softmax(self, axis: int = -1):
        return apply("softmax", self, axis=axis)

    @property
    def T(self):
        return apply("transpose", self)

    def transpose(self):
        return apply("transpose", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def slice_rows(self, start: int, stop: int):
        return apply("slice_rows", self, start=start, stop=stop)

    def slice_cols(self, start: int, stop: int):
        return apply("slice_cols", self, start=start, stop=stop)

    def pad_rows(self, total: int):
        return apply("pad_rows", self, total=total)

    # ---------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Populate ``.grad`` on every node reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        # Reset every node; None stands for an all-zero gradient until the
        # first contribution arrives. Backward rules may return aliased
        # arrays, so a node's first contribution is stored as-is and only a
        # buffer this loop allocated itself is ever updated in place.
        for node in order:
            node.grad = None
        owned: set[int] = set()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.op is None or node.grad is None:
                continue
            grads = OPS[node.op].backward(node.ctx, node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                elif id(parent) in owned:
                    parent.grad += g
                else:
                    parent.grad = parent.grad + g
                    owned.add(id(parent))
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def apply(name: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run the forward rule of ``name`` and record the node on the tape."""
    op = OPS[name]
    out_data, ctx = op.forward(*(t.data for t in inputs), **attrs)
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = name
        out.parents = inputs
        out.ctx = ctx
    return out


# ---------------------------------------------------------------------------
# Elementwise binary ops with scalar / row / column broadcasting.


def _broadcast_shape(a: np.ndarray, b: np.ndarray, name: str) -> tuple[int, ...]:
    if a.shape == b.shape or b.size == 1 and b.ndim <= a.ndim or a.size == 1 and a.ndim <= b.ndim:
        return np.broadcast_shapes(a.shape, b.shape)
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not match") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not match")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "add")
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "sub")
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "mul")
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("div")
class _Div:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "div")
        if np.any(b == 0):
            raise DomainError("div: divisor contains zero")
        out = a / b
        return out, (a, b, out)

    @staticmethod
    def backward(ctx, g):
        a, b, out = ctx
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


@register("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.ndim == b.ndim == 1:
            raise ShapeError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        if a.ndim == 1:
            return g @ b.T, np.outer(a, g)
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g @ b.T, a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


# ---------------------------------------------------------------------------
# Elementwise maps.


@register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(out, g):
        return (g * out,)


@register("log")
class _Log:
    @staticmethod
    def forward(a):
        if np.any(a <= 0):
            raise DomainError("log: input must be strictly positive")
        return np.log(a), a

    @staticmethod
    def backward(a, g):
        return (g / a,)


@register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(a):
        if np.any(a <= 0):
            raise DomainError("sqrt: input must be strictly positive")
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(out, g):
        return (g / (2.0 * out),)


@register("neg")
class _Neg:
    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(_, g):
        return (-g,)


@register("relu")
class _Relu:
    @staticmethod
    def forward(a):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    @staticmethod
    def backward(mask, g):
        return (g * mask,)


# ---------------------------------------------------------------------------
# Reductions.


def _check_axis(a: np.ndarray, axis: int | None, name: str) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{name}: axis {axis} invalid for shape {a.shape}")


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        _check_axis(a, axis, "sum")
        return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx
        return (_expand(g, shape, axis, keepdims).copy(),)


@register("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        _check_axis(a, axis, "mean")
        n = a.size if axis is None else a.shape[axis]
        return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, n)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims, n = ctx
        return (_expand(g, shape, axis, keepdims) / n,)


@register("max")
class _Max:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        _check_axis(a, axis, "max")
        out = a.max(axis=axis, keepdims=True)
        mask = (a == out).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        if not keepdims:
            out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
        return out, (mask, axis, keepdims)

    @staticmethod
    def backward(ctx, g):
        mask, axis, keepdims = ctx
        return (_expand(g, mask.shape, axis, keepdims) * mask,)


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(a, axis=-1):
        _check_axis(a, axis, "softmax")
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# Structural rearrangements.


@register("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
        return a.T, None

    @staticmethod
    def backward(_, g):
        return (g.T,)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        return a.reshape(shape), a.shape

    @staticmethod
    def backward(shape, g):
        return (g.reshape(shape),)


@register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = ", ".join(str(x.shape) for x in arrays)
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
        sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return out, (sizes, axis)

    @staticmethod
    def backward(ctx, g):
        sizes, axis = ctx
        return tuple(np.split(g, sizes, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return apply("concat", *tensors, axis=0)


@register("slice_rows")
class _SliceRows:
    @staticmethod
    def forward(a, start, stop):
        if not 0 <= start < stop <= a.shape[0]:
            raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")
        return a[start:stop], (a.shape, start, stop)

    @staticmethod
    def backward(ctx, g):
        shape, start, stop = ctx
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)


@register("slice_cols")
class _SliceCols:
    @staticmethod
    def forward(a, start, stop):
        if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
            raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")
        return a[:, start:stop], (a.shape, start, stop)

    @staticmethod
    def backward(ctx, g):
        shape, start, stop = ctx
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)


@register("pad_rows")
class _PadRows:
    """Extend to ``total`` rows by cycling from the first row."""

    @staticmethod
    def forward(a, total):
        m = a.shape[0]
        if total < m:
            raise ShapeError(f"pad_rows: target {total} rows is less than {m}")
        idx = np.arange(total) % m
        return a[idx], (a.shape, idx)

    @staticmethod
    def backward(ctx, g):
        shape, idx = ctx
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)


# ---------------------------------------------------------------------------
# Depthwise convolution on an (S, S, C) grid, one K x K filter per channel,
# zero "same" padding. Used by the positional encoding layer.


@register("depthwise_conv2d")
class _DepthwiseConv2d:
    @staticmethod
    def forward(x, k):
        if x.ndim != 3 or k.ndim != 3 or x.shape[2] != k.shape[2] or k.shape[0] != k.shape[1]:
            raise ShapeError(f"depthwise_conv2d: grid {x.shape} vs kernel {k.shape}")
        size = k.shape[0]
        if size % 2 == 0:
            raise ShapeError(f"depthwise_conv2d: kernel size {size} must be odd")
        windows = _windows(x, size)  # (H, W, C, K, K)
        return np.einsum("ijcab,abc->ijc", windows, k), (windows, k)

    @staticmethod
    def backward(ctx, g):
        windows, k = ctx
        size = k.shape[0]
        gx = np.einsum("ijcab,abc->ijc", _windows(g, size), k[::-1, ::-1])
        gk = np.einsum("ijcab,ijc->abc", windows, g)
        return gx, gk


def _windows(x: np.ndarray, size: int) -> np.ndarray:
    r = size // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    return apply("depthwise_conv2d", x, kernel)


# ---------------------------------------------------------------------------
# Fused layers. Their composed equivalents exist (see nn and the tests); the
# fused rules keep the per-patient tape short.


@register("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(x, gain, offset, eps=1e-5):
        if x.shape[-1] != gain.shape[-1] or gain.shape != offset.shape:
            raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, offset {offset.shape}")
        centred = x - x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
        normed = centred * inv
        return normed * gain + offset, (normed, inv, gain)

    @staticmethod
    def backward(ctx, g):
        normed, inv, gain = ctx
        gn = g * gain
        gx = inv * (gn - gn.mean(axis=-1, keepdims=True) - normed * (gn * normed).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * normed).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gain, offset, eps=eps)


@register("attention")
class _Attention:
    """Multi-head scaled dot-product attention; head h uses column block h."""

    @staticmethod
    def forward(q, k, v, heads=1):
        if q.ndim != 2 or k.shape != v.shape or q.shape[1] != k.shape[1] or q.shape[1] % heads:
            raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}")
        dh = q.shape[1] // heads
        scale = 1.0 / np.sqrt(dh)
        qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
        scores = qh @ kh.transpose(0, 2, 1) * scale
        scores -= scores.max(axis=2, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=2, keepdims=True)
        return _merge_heads(attn @ vh), (qh, kh, vh, attn, scale)

    @staticmethod
    def backward(ctx, g):
        qh, kh, vh, attn, scale = ctx
        gh = _split_heads(g, attn.shape[0])
        gv = attn.transpose(0, 2, 1) @ gh
        ga = gh @ vh.transpose(0, 2, 1)
        gs = attn * (ga - (ga * attn).sum(axis=2, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    rows, cols = a.shape
    return a.reshape(rows, heads, cols // heads).transpose(1, 0, 2)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    heads, rows, dh = a.shape
    return a.transpose(1, 0, 2).reshape(rows, heads * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    return apply("attention", q, k, v, heads=heads)


# ---------------------------------------------------------------------------
# Gradient verification.


def finite_difference_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    relative: bool = True,
    floor: float = 1e-6,
) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives one leaf ``Tensor`` per array in ``inputs`` and must return a
    scalar. Returns the worst error over every input coordinate: relative
    (``|a - n| / max(|a|, |n|, floor)``) by default, or absolute when
    ``relative`` is False.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    root = f(*leaves)
    root.backward()
    worst = 0.0
    for leaf, x in zip(leaves, arrays):
        analytic = leaf.grad
        flat = x.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - step
            lo = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        a = (analytic if analytic is not None else np.zeros_like(x)).reshape(-1)
        err = np.abs(a - numeric)
        if relative:
            err = err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
