"""Batch attention building blocks: scaled dot-product, multihead, FFN, positions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class MultiHeadParams:
    """Projections for ``n_heads`` heads.

    ``w_q``, ``w_k`` and ``w_v`` are ``d_model x (M*d)``; columns
    ``m*d:(m+1)*d`` hold head ``m``'s projection.  ``w_o`` is ``M*d x d_model``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if d_model % self.n_heads:
            raise ShapeError(f"d_model={d_model} is not divisible by M={self.n_heads}")
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d_model, d_model):
                raise ShapeError(f"projection shape {w.shape} != {(d_model, d_model)}")
        if self.w_o.shape != (d_model, d_model):
            raise ShapeError(f"output projection shape {self.w_o.shape} != {(d_model, d_model)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class FeedForwardParams:
    w_1: Tensor
    v_1: Tensor
    w_2: Tensor
    v_2: Tensor

    def __post_init__(self):
        d_model, d_ff = self.w_1.shape
        if self.v_1.shape != (d_ff,) or self.w_2.shape != (d_ff, d_model) or self.v_2.shape != (d_model,):
            raise ShapeError("inconsistent feed-forward parameter shapes")


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return nx.layer_norm(x, p.gain, p.bias)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    ``mask`` is boolean with True at allowed positions.  Returns ``(out, weights)``.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys and values disagree in length: {k.shape} vs {v.shape}")
    d = q.shape[-1]
    logits = (q @ nx.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(d))
    weights = nx.softmax_rows(logits, mask)
    return weights @ v, weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``t x (M*d)`` -> ``M x t x d``."""
    t, width = x.shape
    return x.reshape(t, n_heads, width // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """``M x t x d`` -> ``t x (M*d)``; inverse of :func:`split_heads`."""
    m, t, d = x.shape
    return x.transpose(1, 0, 2).reshape(t, m * d)


def multi_head(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: MultiHeadParams,
    mask: np.ndarray | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    for x in (q, k, v):
        if x.shape[-1] != p.d_model:
            raise ShapeError(f"expected {p.d_model} columns, got {x.shape}")
    qh = split_heads(q @ p.w_q, p.n_heads)
    kh = split_heads(k @ p.w_k, p.n_heads)
    vh = split_heads(v @ p.w_v, p.n_heads)
    d = p.d_head
    logits = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
    weights = nx.softmax_rows(logits, mask)
    out = merge_heads(nx.dropout(weights, dropout, rng) @ vh) @ p.w_o
    return (out, weights) if return_weights else out


def positionwise_ffn(
    x: Tensor, p: FeedForwardParams, dropout: float = 0.0, rng: np.random.Generator | None = None
) -> Tensor:
    if x.shape[-1] != p.w_1.shape[0]:
        raise ShapeError(f"FFN input has {x.shape[-1]} columns, expected {p.w_1.shape[0]}")
    hidden = nx.dropout(nx.relu(x @ p.w_1 + p.v_1), dropout, rng)
    return hidden @ p.w_2 + p.v_2


def positional_encoding(positions, d_model: int) -> np.ndarray:
    """Sinusoidal encoding; even columns sin, odd columns cos."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    if (pos < 0).any():
        raise ValueError("positions must be non-negative")
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
