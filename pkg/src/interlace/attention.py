"""Multi-head scaled dot-product attention with optional key masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigurationError,
    Tensor,
    bmm,
    init_uniform,
    matmul,
    reshape,
    softmax_rows,
    transpose,
)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bv: Tensor
    bo: Tensor

    @staticmethod
    def init(rng: np.random.Generator, dim: int) -> "AttentionParams":
        return AttentionParams(
            wq=init_uniform(rng, (dim, dim), dim),
            wk=init_uniform(rng, (dim, dim), dim),
            wv=init_uniform(rng, (dim, dim), dim),
            wo=init_uniform(rng, (dim, dim), dim),
            bq=init_uniform(rng, (dim,), dim),
            bv=init_uniform(rng, (dim,), dim),
            bo=init_uniform(rng, (dim,), dim),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")}


@dataclass
class AttentionOutput:
    output: Tensor          # n_q x D
    weights: np.ndarray     # h x n_q x n_k, detached; rows sum to 1
    logits: Tensor          # h x n_q x n_k scaled pre-softmax logits, in-graph


def _split_heads(x: Tensor, n: int, heads: int, dh: int) -> Tensor:
    return transpose(reshape(x, (n, heads, dh)), (1, 0, 2))


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor,
                         params: AttentionParams, heads: int,
                         key_mask: np.ndarray | None = None) -> AttentionOutput:
    """Scaled dot-product attention with heads split along the feature axis.

    key_mask, when given, is boolean over keys with True marking a masked key;
    masked keys receive attention weight exactly 0 (at least one key must
    stay visible).
    """
    dim = q_tokens.shape[-1]
    if dim % heads != 0:
        raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
    dh = dim // heads
    n_q, n_k = q_tokens.shape[0], kv_tokens.shape[0]

    q = matmul(q_tokens, params.wq) + params.bq
    # no key bias: a shared shift on every key cancels in the row softmax
    k = matmul(kv_tokens, params.wk)
    v = matmul(kv_tokens, params.wv) + params.bv

    qh = _split_heads(q, n_q, heads, dh)
    kh = _split_heads(k, n_k, heads, dh)
    vh = _split_heads(v, n_k, heads, dh)

    logits = bmm(qh, transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    weights = softmax_rows(logits, column_mask=key_mask)
    merged = reshape(transpose(bmm(weights, vh), (1, 0, 2)), (n_q, dim))
    output = matmul(merged, params.wo) + params.bo
    return AttentionOutput(output=output, weights=weights.data, logits=logits)
