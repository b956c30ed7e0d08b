"""Interlaced cross-attention decoder and its objective.

A block holds two cross-attention layers. The odd layer updates the 3D token
set (queries) against the 2D token set (key-values); the even layer swaps
roles and reads from the odd layer's freshly updated 3D tokens. Key-side
class tokens are masked out of every softmax, so queries mix only data-token
values; the class-to-class logit block is still computed and drives the
symmetric contrastive term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, multi_head_attention
from .autodiff import (
    ConfigurationError,
    Tensor,
    init_uniform,
    layer_norm_rows,
    logsumexp_rows,
    matmul,
    relu,
    tmean,
    transpose,
)
from .encoder import class_token_scores, multilabel_loss


@dataclass
class CrossLayerParams:
    lnq_g: Tensor
    lnq_b: Tensor
    lnkv_g: Tensor
    lnkv_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @staticmethod
    def init(rng: np.random.Generator, dim: int, width: int) -> "CrossLayerParams":
        return CrossLayerParams(
            lnq_g=Tensor(np.ones(dim), requires_grad=True),
            lnq_b=Tensor(np.zeros(dim), requires_grad=True),
            lnkv_g=Tensor(np.ones(dim), requires_grad=True),
            lnkv_b=Tensor(np.zeros(dim), requires_grad=True),
            attn=AttentionParams.init(rng, dim),
            ln2_g=Tensor(np.ones(dim), requires_grad=True),
            ln2_b=Tensor(np.zeros(dim), requires_grad=True),
            mlp_w1=init_uniform(rng, (dim, width), dim),
            mlp_b1=init_uniform(rng, (width,), dim),
            mlp_w2=init_uniform(rng, (width, dim), width),
            mlp_b2=init_uniform(rng, (dim,), width),
        )

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.{k}": getattr(self, k)
               for k in ("lnq_g", "lnq_b", "lnkv_g", "lnkv_b", "ln2_g", "ln2_b",
                         "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


@dataclass
class InterlacedBlock:
    odd: CrossLayerParams     # 3D tokens query 2D tokens
    even: CrossLayerParams    # 2D tokens query the updated 3D tokens

    @staticmethod
    def init(rng: np.random.Generator, dim: int, width: int) -> "InterlacedBlock":
        return InterlacedBlock(odd=CrossLayerParams.init(rng, dim, width),
                               even=CrossLayerParams.init(rng, dim, width))

    def named(self, prefix: str) -> dict:
        return {**self.odd.named(f"{prefix}.odd"), **self.even.named(f"{prefix}.even")}


@dataclass
class DecoderTrace:
    tokens_3d: Tensor          # (C + S) x D after the last block
    tokens_2d: Tensor          # (C + T) x D after the last block
    attention: list            # per layer: head-averaged weights, detached
    parities: list             # "odd" / "even" per retained attention record
    class_class_logits: list   # per layer: C x C Tensor (head-averaged)
    n_class: int


def cross_attend_masked(queries: Tensor, keyvals: Tensor, params: CrossLayerParams,
                        heads: int, n_class: int):
    """One decoder layer: queries read from the key-value set's data tokens.

    Returns the updated query token set, the head-averaged attention weights
    (detached), and the C x C class-to-class logit block kept in-graph for the
    contrastive loss.
    """
    if queries.shape[1] != keyvals.shape[1]:
        raise ConfigurationError("query/key-value dim mismatch")
    n_keys = keyvals.shape[0]
    if n_class >= n_keys:
        raise ConfigurationError("key-value set has no data tokens")
    key_mask = np.zeros(n_keys, dtype=bool)
    key_mask[:n_class] = True    # key-side class tokens never receive weight

    qn = layer_norm_rows(queries, params.lnq_g, params.lnq_b)
    kn = layer_norm_rows(keyvals, params.lnkv_g, params.lnkv_b)
    att = multi_head_attention(qn, kn, params.attn, heads, key_mask=key_mask)

    cc = tmean(att.logits[:, :n_class, :n_class], axis=0)

    x = queries + att.output
    h = layer_norm_rows(x, params.ln2_g, params.ln2_b)
    x = x + (matmul(relu(matmul(h, params.mlp_w1) + params.mlp_b1),
                    params.mlp_w2) + params.mlp_b2)
    return x, att.weights.mean(axis=0), cc


def interlaced_block(f3d: Tensor, f2d: Tensor, block: InterlacedBlock,
                     heads: int, n_class: int):
    """Apply one block; the even layer consumes the odd layer's output."""
    f3d_new, attn_odd, cc_odd = cross_attend_masked(f3d, f2d, block.odd,
                                                    heads, n_class)
    f2d_new, attn_even, cc_even = cross_attend_masked(f2d, f3d_new, block.even,
                                                      heads, n_class)
    return f3d_new, f2d_new, (attn_odd, cc_odd), (attn_even, cc_even)


def decode(f3d: Tensor, f2d: Tensor, blocks: list[InterlacedBlock],
           heads: int, n_class: int) -> DecoderTrace:
    """Run all R blocks, retaining the 2R attention records in order."""
    if not blocks:
        raise ConfigurationError("decoder needs at least one block")
    attention, parities, cc_blocks = [], [], []
    for block in blocks:
        f3d, f2d, odd_rec, even_rec = interlaced_block(f3d, f2d, block,
                                                       heads, n_class)
        for parity, (attn, cc) in (("odd", odd_rec), ("even", even_rec)):
            attention.append(attn)
            parities.append(parity)
            cc_blocks.append(cc)
    return DecoderTrace(tokens_3d=f3d, tokens_2d=f2d, attention=attention,
                        parities=parities, class_class_logits=cc_blocks,
                        n_class=n_class)


def class_contrastive_loss(class_class_logit_blocks: list[Tensor]) -> Tensor:
    """Symmetric row/column cross-entropy with diagonal targets.

    Each C x C logit block is read as log of a positive attention matrix;
    rows and columns are both pushed toward probability mass on the diagonal,
    averaged over the retained decoder layers.
    """
    total = None
    for block in class_class_logit_blocks:
        c = block.shape[0]
        diag = block[np.arange(c), np.arange(c)]
        row_term = (logsumexp_rows(block) - diag).sum()
        col_term = (logsumexp_rows(transpose(block)) - diag).sum()
        term = row_term + col_term
        total = term if total is None else total + term
    return total * (1.0 / len(class_class_logit_blocks))


@dataclass
class DecoderLosses:
    class_2d: Tensor
    class_3d: Tensor
    contrastive: Tensor
    total: Tensor


def decoder_loss(trace: DecoderTrace, tags: np.ndarray, alpha: float) -> DecoderLosses:
    """Tag losses on the decoded class tokens plus the weighted contrastive term."""
    if alpha < 0:
        raise ConfigurationError("alpha must be nonnegative")
    c = trace.n_class
    l3 = multilabel_loss(class_token_scores(trace.tokens_3d[:c, :]), tags)
    l2 = multilabel_loss(class_token_scores(trace.tokens_2d[:c, :]), tags)
    lcon = class_contrastive_loss(trace.class_class_logits)
    return DecoderLosses(class_2d=l2, class_3d=l3, contrastive=lcon,
                         total=l2 + l3 + lcon * alpha)
