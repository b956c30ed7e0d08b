"""CAM refinement, pseudo-label extraction, and segmentation metrics.

Everything here is inference-side numpy: class activation maps produced by the
model are refined by class-to-voxel attention (encoder last-K layers, decoder
even layers), fused by elementwise max, converted to per-point pseudo labels
behind a confidence cut, and scored with mIoU / mAP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigurationError, ShapeError
from .decoder import DecoderTrace
from .encoder import EncoderTrace
from .geometry import SupervoxelPartition

IGNORE = -1


@dataclass
class PseudoLabels:
    labels: np.ndarray        # per point, class index or IGNORE
    confidence: np.ndarray    # per point in [0, 1]


def refine_cam_encoder(cam: np.ndarray, trace: EncoderTrace, k: int = 3) -> np.ndarray:
    """Refine an S x C CAM by class-to-voxel self-attention.

    The class-to-voxel map is the class-token-row / data-token-column block of
    the attention, averaged over heads and over the last k encoder layers.
    """
    if k > len(trace.attention):
        raise ConfigurationError(f"k={k} exceeds {len(trace.attention)} encoder layers")
    c = trace.n_class
    stacked = np.stack([a.mean(axis=0)[:c, c:] for a in trace.attention[-k:]])
    a_c2s = stacked.mean(axis=0)                    # C x S
    return cam * a_c2s.T


def refine_cam_decoder(cam: np.ndarray, trace: DecoderTrace) -> np.ndarray:
    """Refine by the decoder's even-layer 2D-class-to-supervoxel attention."""
    c = trace.n_class
    even = [a for a, parity in zip(trace.attention, trace.parities)
            if parity == "even"]
    if not even:
        raise ConfigurationError("decoder trace has no even layers")
    a_c2s = np.stack([a[:c, c:] for a in even]).mean(axis=0)   # C x S
    return cam * a_c2s.T


def fuse_cams(f: np.ndarray, f_hat: np.ndarray) -> np.ndarray:
    if f.shape != f_hat.shape:
        raise ShapeError(f"cam shapes differ: {f.shape} vs {f_hat.shape}")
    return np.maximum(f, f_hat)


def pseudo_labels(cam: np.ndarray, scene_scores: np.ndarray,
                  partition: SupervoxelPartition,
                  threshold: float = 0.5) -> PseudoLabels:
    """Per-point labels from a supervoxel CAM behind a confidence cut.

    Classes whose scene-level sigmoid score is at most 0.5 are suppressed.
    Each supervoxel takes a softmax over the surviving classes; its argmax
    (ties to the lowest class index) becomes the label of all member points
    when the winning probability exceeds the threshold, IGNORE otherwise.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("threshold must lie in (0, 1)")
    s, c = cam.shape
    keep = 1.0 / (1.0 + np.exp(-np.asarray(scene_scores, dtype=np.float64))) > 0.5
    m = partition.assignment.shape[0]
    if not keep.any():
        return PseudoLabels(labels=np.full(m, IGNORE, dtype=np.int64),
                            confidence=np.zeros(m))

    logits = np.where(keep[None, :], cam, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    sv_label = p.argmax(axis=1)       # argmax picks the first (lowest) index on ties
    sv_conf = p.max(axis=1)

    conf = sv_conf[partition.assignment]
    labels = sv_label[partition.assignment].astype(np.int64)
    labels[conf <= threshold] = IGNORE
    return PseudoLabels(labels=labels, confidence=conf)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """n_classes x n_classes counts over points where pred != IGNORE."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError("pred/gt length mismatch")
    valid = pred != IGNORE
    return np.bincount(gt[valid] * n_classes + pred[valid],
                       minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray):
    """Per-class IoU (NaN when the class is absent from both) and the mean."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def compute_miou(pred: np.ndarray, gt: np.ndarray, n_classes: int):
    """Per-class IoU and mean over classes present in pred or gt."""
    return iou_from_confusion(confusion_matrix(pred, gt, n_classes))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP over a ranking: mean of precision at each positive hit."""
    order = np.argsort(-scores, kind="stable")
    hits = positives[order].astype(np.float64)
    n_pos = hits.sum()
    if n_pos == 0:
        return float("nan")
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / n_pos)


def compute_map(view_scores: np.ndarray, view_tags: np.ndarray):
    """Mean average precision of per-view multi-label tag prediction.

    Classes with no positive view are excluded from the mean.
    """
    view_scores = np.asarray(view_scores, dtype=np.float64)
    view_tags = np.asarray(view_tags)
    if view_scores.shape != view_tags.shape:
        raise ShapeError("score/tag shape mismatch")
    aps = np.array([average_precision(view_scores[:, c], view_tags[:, c] > 0)
                    for c in range(view_scores.shape[1])])
    valid = ~np.isnan(aps)
    return aps, (float(aps[valid].mean()) if valid.any() else float("nan"))
