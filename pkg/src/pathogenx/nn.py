"""Layers used by the encoder/decoder: linear, layer norm, MSA, PPEG, MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, attention, concat_rows, depthwise_conv2d, layer_norm

PPEG_KERNEL_SIZES = (7, 5, 3)


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "LinearParams":
        return cls(_param(xavier_uniform(rng, n_in, n_out)), _param(np.zeros(n_out)))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gain: Tensor
    offset: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("layer norm epsilon must be positive")

    @classmethod
    def init(cls, dim: int, epsilon: float = 1e-5) -> "LayerNormParams":
        return cls(_param(np.ones(dim)), _param(np.zeros(dim)), epsilon)


@dataclass
class MSAParams:
    """Query/key/value maps (D x D, head h owns column block h) and a shared output map."""

    query: Tensor
    key: Tensor
    value: Tensor
    out: LinearParams
    heads: int = 4

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int) -> "MSAParams":
        if heads < 1 or dim % heads:
            raise ValueError(f"head count {heads} must divide embedding dim {dim}")
        dh = dim // heads
        # Each head block gets its own fan-balanced init (fan-out D/h).
        q, k, v = (
            _param(np.concatenate([xavier_uniform(rng, dim, dh) for _ in range(heads)], axis=1))
            for _ in range(3)
        )
        return cls(q, k, v, LinearParams.init(rng, dim, dim), heads)


@dataclass
class PPEGParams:
    kernels: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, scale: float = 0.02) -> "PPEGParams":
        return cls([_param(rng.normal(0.0, scale, size=(s, s, dim))) for s in PPEG_KERNEL_SIZES])


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested parameter dataclasses/lists in declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")


# ---------------------------------------------------------------------------
# Forward passes.


def linear_forward(params: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.n_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {params.n_in}")
    return x @ params.weight + params.bias


def layer_norm_forward(params: LayerNormParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.gain.shape[0]:
        raise ShapeError(f"layer_norm: width {x.shape[-1]} != {params.gain.shape[0]}")
    return layer_norm(x, params.gain, params.offset, params.epsilon)


def msa_forward(params: MSAParams, x: Tensor, query_rows: int | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over the rows of ``x``.

    With ``query_rows=r`` only the first r output rows are produced (keys and
    values still span every row), which is all the decoder's last block needs.
    """
    dim = params.out.n_in
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"msa: expected M x {dim} tokens, got {x.shape}")
    q_in = x if query_rows is None else x.slice_rows(0, query_rows)
    merged = attention(q_in @ params.query, x @ params.key, x @ params.value, params.heads)
    return linear_forward(params.out, merged)


def ppeg_forward(params: PPEGParams, tokens: Tensor) -> Tensor:
    """Positional encoding over a square arrangement of the patch tokens.

    Row 0 (class token) bypasses the convolutions. Patch tokens are cycled from
    the start of the sequence up to the next square, convolved depthwise with
    each kernel plus an identity path, then truncated back to N rows.
    """
    n = tokens.shape[0] - 1
    if n < 1:
        raise ShapeError("ppeg: need at least one patch token besides the class token")
    dim = tokens.shape[1]
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    cls_token = tokens.slice_rows(0, 1)
    patches = tokens.slice_rows(1, n + 1)
    if side * side > n:
        patches = patches.pad_rows(side * side)
    grid = patches.reshape(side, side, dim)
    out = grid
    for kernel in params.kernels:
        out = out + depthwise_conv2d(grid, kernel)
    flat = out.reshape(side * side, dim)
    if side * side > n:
        flat = flat.slice_rows(0, n)
    return concat_rows([cls_token, flat])


def mlp_forward(layers: list[LinearParams], x: Tensor) -> Tensor:
    """Linear layers with ReLU between them; the last layer is left linear."""
    for i, layer in enumerate(layers):
        x = linear_forward(layer, x)
        if i < len(layers) - 1:
            x = x.relu()
    return x


def init_mlp(rng: np.random.Generator, sizes: list[int]) -> list[LinearParams]:
    return [LinearParams.init(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

