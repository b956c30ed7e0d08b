"""Multi-class-token transformer encoders and the scene-tag objective.

Each encoder prepends C learnable class tokens to its data tokens (supervoxels
for 3D, pooled views for 2D) and applies pre-norm self-attention layers. Per
layer attention matrices are kept for CAM refinement. Scene-level class scores
come from two heads: the per-class mean of the class-token rows, and the
column means of the class-aware activation map over data tokens. Both heads
take a multi-label binary cross-entropy against the scene tags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, multi_head_attention
from .autodiff import (
    Tensor,
    concat,
    init_uniform,
    layer_norm_rows,
    matmul,
    relu,
    softplus,
    tmean,
)


@dataclass
class EncoderLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @staticmethod
    def init(rng: np.random.Generator, dim: int, width: int) -> "EncoderLayerParams":
        return EncoderLayerParams(
            ln1_g=Tensor(np.ones(dim), requires_grad=True),
            ln1_b=Tensor(np.zeros(dim), requires_grad=True),
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
               for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b",
                         "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


@dataclass
class EncoderTrace:
    tokens: Tensor             # (C + n_data) x D, class rows first
    attention: list            # per layer: heads x (C+n) x (C+n), detached
    n_class: int

    def class_tokens(self) -> Tensor:
        return self.tokens[:self.n_class, :]

    def data_tokens(self) -> Tensor:
        return self.tokens[self.n_class:, :]


def _mlp(x, p: EncoderLayerParams):
    return matmul(relu(matmul(x, p.mlp_w1) + p.mlp_b1), p.mlp_w2) + p.mlp_b2


def encode(features: Tensor, positional: Tensor, class_tokens: Tensor,
           layers: list[EncoderLayerParams], heads: int) -> EncoderTrace:
    """Self-attend class tokens plus (features + positional) data tokens.

    Class tokens receive no positional embedding. Layers are pre-norm: the
    residual stream passes through untouched when the attention-output and
    MLP-output projections are zero.
    """
    n_class = class_tokens.shape[0]
    x = concat([class_tokens, features + positional], axis=0)
    attention = []
    for layer in layers:
        h = layer_norm_rows(x, layer.ln1_g, layer.ln1_b)
        att = multi_head_attention(h, h, layer.attn, heads)
        x = x + att.output
        x = x + _mlp(layer_norm_rows(x, layer.ln2_g, layer.ln2_b), layer)
        attention.append(att.weights)
    return EncoderTrace(tokens=x, attention=attention, n_class=n_class)


def class_token_scores(class_tokens: Tensor) -> Tensor:
    """One scene-level logit per class: the mean of that class token's row."""
    return tmean(class_tokens, axis=1)


def class_aware_cam(data_tokens: Tensor, weight: Tensor, bias: Tensor):
    """Linear class-activation map over data tokens plus its pooled scores.

    cam[i, c] scores token i against class c; scores are the column means.
    """
    cam = matmul(data_tokens, weight) + bias
    return cam, tmean(cam, axis=0)


def multilabel_loss(scores: Tensor, tags: np.ndarray) -> Tensor:
    """Binary cross-entropy with logits, averaged over classes."""
    y = np.asarray(tags, dtype=np.float64)
    # softplus(s) - y*s == y*softplus(-s) + (1-y)*softplus(s)
    return tmean(softplus(scores) - Tensor(y) * scores)


@dataclass
class EncoderLosses:
    class_3d: Tensor
    cam_3d: Tensor
    class_2d: Tensor | None
    cam_2d: Tensor | None
    total: Tensor


def encoder_loss(trace_3d: EncoderTrace, cam_scores_3d: Tensor,
                 trace_2d: EncoderTrace | None, cam_scores_2d: Tensor | None,
                 tags: np.ndarray) -> EncoderLosses:
    """Sum of the per-modality class-token and CAM-score tag losses.

    The 2D terms drop out in 3D-only mode.
    """
    l_c3 = multilabel_loss(class_token_scores(trace_3d.class_tokens()), tags)
    l_s3 = multilabel_loss(cam_scores_3d, tags)
    total = l_c3 + l_s3
    l_c2 = l_t2 = None
    if trace_2d is not None:
        l_c2 = multilabel_loss(class_token_scores(trace_2d.class_tokens()), tags)
        l_t2 = multilabel_loss(cam_scores_2d, tags)
        total = total + l_c2 + l_t2
    return EncoderLosses(class_3d=l_c3, cam_3d=l_s3,
                         class_2d=l_c2, cam_2d=l_t2, total=total)
