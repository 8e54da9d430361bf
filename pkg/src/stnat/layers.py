"""Transformer building blocks: attention, GLU feed-forward, sinusoidal
positions and the strided convolutional front end.

Weights are stored input-major (``x @ W``). Blocks are pre-norm:
``x + sublayer(norm(x))``.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    conv_time,
    dropout,
    glu,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)


class Module:
    """Parameter container. Tensors, child modules and lists of modules found
    in attributes are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def xavier(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32) -> Tensor:
    a = math.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-a, a, size=(n_in, n_out)).astype(dtype), requires_grad=True)


def zeros(*shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = xavier(rng, n_in, n_out, dtype)
        self.bias = zeros(n_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = zeros(d, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class AttentionParams(Module):
    """Per-head projections packed column-wise: head ``i`` of ``wq`` is
    ``wq[:, i*d_k:(i+1)*d_k]``."""

    def __init__(self, d_m: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_m % n_heads:
            raise DimensionError(f"d_m={d_m} not divisible by n_h={n_heads}")
        self.n_heads = n_heads
        self.wq = xavier(rng, d_m, d_m, dtype)
        self.wk = xavier(rng, d_m, d_m, dtype)
        self.wv = xavier(rng, d_m, d_m, dtype)
        self.wo = xavier(rng, d_m, d_m, dtype)


class FfnParams(Module):
    def __init__(self, d_m: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.w1 = xavier(rng, d_m, 2 * d_ff, dtype)
        self.b1 = zeros(2 * d_ff, dtype=dtype)
        self.w2 = xavier(rng, d_ff, d_m, dtype)
        self.b2 = zeros(d_m, dtype=dtype)


class BlockParams(Module):
    def __init__(self, d_m: int, n_heads: int, d_ff: int, rng: np.random.Generator,
                 source_attention: bool = False, dtype=np.float32):
        self.norm_self = LayerNorm(d_m, dtype)
        self.self_attn = AttentionParams(d_m, n_heads, rng, dtype)
        if source_attention:
            self.norm_src = LayerNorm(d_m, dtype)
            self.src_attn = AttentionParams(d_m, n_heads, rng, dtype)
        self.norm_ffn = LayerNorm(d_m, dtype)
        self.ffn = FfnParams(d_m, d_ff, rng, dtype)

    @property
    def has_source_attention(self) -> bool:
        return hasattr(self, "src_attn")


class FrontEndParams(Module):
    def __init__(self, feat_dim: int, d_m: int, rng: np.random.Generator, dtype=np.float32,
                 width: int = 3):
        self.conv1 = Linear(width * feat_dim, d_m, rng, dtype)
        self.conv2 = Linear(width * d_m, d_m, rng, dtype)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def self_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                   weights_out: list | None = None, drop: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` broadcasts against the score grid; false entries get zero weight.
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in length")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(k.shape[-1]))
    w = softmax(scores, axis=-1, mask=mask)
    if weights_out is not None:
        weights_out.append(w.data)
    w = dropout(w, drop, rng)
    return matmul(w, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = reshape(x, tuple(lead) + (t, n_heads, d // n_heads))
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, tuple(lead) + (t, h * dk))


def multi_head(x_q: Tensor, x_kv: Tensor, p: AttentionParams, mask: np.ndarray | None = None,
               weights_out: list | None = None, drop: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head attention. Inputs are ``(..., T, d_m)``; ``mask`` broadcasts
    against ``(..., n_h, T_q, T_kv)``."""
    d_m = p.wq.shape[0]
    if x_q.shape[-1] != d_m or x_kv.shape[-1] != d_m:
        raise DimensionError(f"attention expects width {d_m}, got {x_q.shape[-1]}/{x_kv.shape[-1]}")
    q = _split_heads(matmul(x_q, p.wq), p.n_heads)
    k = _split_heads(matmul(x_kv, p.wk), p.n_heads)
    v = _split_heads(matmul(x_kv, p.wv), p.n_heads)
    heads = self_attention(q, k, v, mask, weights_out, drop, rng)
    return matmul(_merge_heads(heads), p.wo)


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"ffn expects width {p.w1.shape[0]}, got {x.shape[-1]}")
    return matmul(glu(matmul(x, p.w1) + p.b1), p.w2) + p.b2


# ---------------------------------------------------------------------------
# positions and front end
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _sinusoid(length: int, d_m: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    k = np.arange(0, d_m, 2)[None, :]
    angle = pos / np.power(10000.0, k / d_m)
    pe = np.zeros((length, d_m))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_m // 2])
    pe.setflags(write=False)
    return pe


def positional_embedding(length: int, d_m: int, dtype=np.float64) -> Tensor:
    """Interleaved sin/cos table: row t, columns (2k, 2k+1) hold
    sin/cos(t / 10000^(2k/d_m))."""
    if length < 0:
        raise ValueError("length must be non-negative")
    return Tensor(_sinusoid(length, d_m).astype(dtype))


def conv_out_length(n: int | np.ndarray):
    """Frames after one stride-2 convolution."""
    return -(-np.asarray(n) // 2)


def front_end_lengths(n):
    return conv_out_length(conv_out_length(n))


def _zero_tail(x: Tensor, lengths) -> Tensor:
    if lengths is None:
        return x
    keep = np.arange(x.shape[-2])[None, :] < np.asarray(lengths)[:, None]
    return x * Tensor(keep[..., None].astype(x.dtype))


def conv_front_end(feat: Tensor, p: FrontEndParams, lengths=None,
                   add_positions: bool = True) -> Tensor:
    """Two stride-2 ReLU convolutions over time, then positions.

    ``feat`` is ``(T, F)`` or ``(B, T, F)``. With ``lengths`` (batched input)
    frames past each utterance's end are zeroed before and after every layer so padding
    never leaks into real frames.
    """
    if feat.shape[-2] < 1:
        raise ValueError("front end needs at least one frame")
    l1 = None if lengths is None else conv_out_length(lengths)
    x = relu(conv_time(_zero_tail(feat, lengths), p.conv1.weight, p.conv1.bias))
    x = _zero_tail(x, l1)
    x = relu(conv_time(x, p.conv2.weight, p.conv2.bias))
    x = _zero_tail(x, None if l1 is None else conv_out_length(l1))
    if add_positions:
        x = x + positional_embedding(x.shape[-2], x.shape[-1], x.dtype)
    return x


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def encoder_block(x: Tensor, p: BlockParams, mask: np.ndarray | None = None,
                  drop: float = 0.0, rng: np.random.Generator | None = None,
                  weights_out: list | None = None) -> Tensor:
    h = p.norm_self(x)
    x = x + dropout(multi_head(h, h, p.self_attn, mask, weights_out, drop, rng), drop, rng)
    h = p.norm_ffn(x)
    return x + dropout(ffn(h, p.ffn), drop, rng)


def decoder_block(x: Tensor, enc: Tensor, p: BlockParams, self_mask=None, src_mask=None,
                  drop: float = 0.0, rng: np.random.Generator | None = None,
                  src_weights_out: list | None = None) -> Tensor:
    h = p.norm_self(x)
    x = x + dropout(multi_head(h, h, p.self_attn, self_mask, None, drop, rng), drop, rng)
    h = p.norm_src(x)
    x = x + dropout(multi_head(h, enc, p.src_attn, src_mask, src_weights_out, drop, rng), drop, rng)
    h = p.norm_ffn(x)
    return x + dropout(ffn(h, p.ffn), drop, rng)
