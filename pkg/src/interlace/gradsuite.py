"""Registered finite-difference checks for every differentiable operation.

Each entry builds a small random instance and compares the reverse-mode
gradient against central differences. `run_all` repeats each check over
several seeds and reports the worst case, which is what both the CLI
`gradcheck` subcommand and the acceptance suite consume.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionParams, multi_head_attention
from .autodiff import GradcheckResult, Tensor, gradcheck, softmax_rows, tsum
from .config import Config
from .decoder import class_contrastive_loss
from .encoder import (
    EncoderLayerParams,
    class_aware_cam,
    class_token_scores,
    encode,
    multilabel_loss,
)
from .geometry import (
    ConvParams,
    MlpParams,
    SupervoxelPartition,
    coordinate_embedding,
    supervoxel_average_pool,
    supervoxel_partition,
    view_featurize,
)
from .model import Model
from .scenes import CameraView, PointCloud, Scene


def _check_softmax(rng):
    m = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = rng.normal(size=(3, 5))
    mask = np.zeros(5, dtype=bool)
    mask[4] = True
    return gradcheck(lambda t: tsum(softmax_rows(t, column_mask=mask) * Tensor(w)),
                     [m])


def _check_attention(rng):
    params = AttentionParams.init(rng, 8)
    q = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    kv = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w = rng.normal(size=(3, 8))
    mask = np.array([True, False, False, False])
    inputs = [q, kv] + [getattr(params, k)
                        for k in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")]

    def fn(*_):
        out = multi_head_attention(q, kv, params, heads=2, key_mask=mask)
        return tsum(out.output * Tensor(w))

    return gradcheck(fn, inputs)


def _check_coordinate_embedding(rng):
    params = MlpParams.init(rng, 3, 6, 6)
    coords = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = rng.normal(size=(4, 6))
    inputs = [coords, params.w1, params.b1, params.w2, params.b2]
    return gradcheck(lambda *_: tsum(coordinate_embedding(coords, params) * Tensor(w)),
                     inputs)


def _check_supervoxel_pool(rng):
    feats = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    partition = SupervoxelPartition(assignment=np.array([0, 1, 1, 2, 0, 2, 1]),
                                    n_supervoxels=3)
    w = rng.normal(size=(3, 4))
    return gradcheck(lambda t: tsum(supervoxel_average_pool(t, partition) * Tensor(w)),
                     [feats])


def _check_view_featurize(rng):
    params = ConvParams.init(rng, 3, 4, 6)
    images = rng.uniform(size=(2, 8, 8, 3))
    w = rng.normal(size=(2, 6))
    inputs = [params.w1, params.b1, params.w2, params.b2]
    return gradcheck(lambda *_: tsum(view_featurize(images, params) * Tensor(w)),
                     inputs)


def _check_class_aware_cam(rng):
    tokens = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2,)), requires_grad=True)
    tags = np.array([1, 0])

    def fn(*_):
        cam, scores = class_aware_cam(tokens, w, b)
        return multilabel_loss(scores, tags) + tsum(cam) * 0.1

    return gradcheck(fn, [tokens, w, b])


def _check_multilabel_loss(rng):
    scores = Tensor(rng.normal(size=(4,)), requires_grad=True)
    tags = np.array([1, 0, 1, 1])
    return gradcheck(lambda t: multilabel_loss(t, tags), [scores])


def _check_encoder_layer(rng):
    layer = EncoderLayerParams.init(rng, 8, 8)
    feats = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    pos = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    cls = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    tags = np.array([1, 0])
    inputs = [feats, pos, cls] + list(layer.named("l").values())

    def fn(*_):
        trace = encode(feats, pos, cls, [layer], heads=2)
        return multilabel_loss(class_token_scores(trace.class_tokens()), tags)

    return gradcheck(fn, inputs)


def _check_contrastive(rng):
    blocks = [Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(2)]
    return gradcheck(lambda *_: class_contrastive_loss(blocks), blocks)


def _tiny_scene(rng, n_classes=2, n_clusters=5, n_views=3):
    """A hand-built scene whose grid partition has exactly n_clusters cells."""
    cell = 0.25
    centers = (np.arange(n_clusters)[:, None] * np.array([1.0, 0.0, 0.0])) * cell \
        + cell / 2
    reps = 3
    xyz = np.repeat(centers, reps, axis=0) \
        + rng.uniform(-0.4, 0.4, size=(n_clusters * reps, 3)) * cell * 0.5
    rgb = rng.uniform(size=(n_clusters * reps, 3))
    labels = rng.integers(0, n_classes, size=n_clusters * reps)
    labels[:n_classes] = np.arange(n_classes)     # every class present
    views = [CameraView(image=rng.uniform(size=(8, 8, 3))) for _ in range(n_views)]
    tags = np.zeros(n_classes, dtype=np.int64)
    tags[np.unique(labels)] = 1
    return Scene(scene_id="tiny", cloud=PointCloud(points=np.hstack([xyz, rgb]),
                                                   labels=labels),
                 views=views, tags=tags)


def _check_end_to_end(rng):
    """d(L_enc + L_dec)/d(every parameter) on a small two-modality scene."""
    cfg = Config(n_classes=2, heads=2, enc_layers=1, blocks=1, dim=8,
                 mlp_width=8, conv_mid=2, views=3, seed=int(rng.integers(1 << 31)))
    model = Model(cfg)
    scene = _tiny_scene(rng, n_classes=2, n_views=3)
    partition = supervoxel_partition(scene.cloud, cfg.cell_size)
    params = model.parameters()
    inputs = list(params.values())

    def fn(*_):
        return model.forward_scene(scene, np.arange(3), partition).loss

    return gradcheck(fn, inputs)


CHECKS = [
    ("softmax_rows", _check_softmax),
    ("multi_head_attention", _check_attention),
    ("coordinate_embedding", _check_coordinate_embedding),
    ("supervoxel_average_pool", _check_supervoxel_pool),
    ("view_featurize", _check_view_featurize),
    ("class_aware_cam", _check_class_aware_cam),
    ("multilabel_loss", _check_multilabel_loss),
    ("encoder_layer", _check_encoder_layer),
    ("class_contrastive_loss", _check_contrastive),
    ("end_to_end_loss", _check_end_to_end),
]


def run_all(seeds: int = 3, tol: float = 1e-4):
    """Worst-over-seeds result per registered check."""
    results = []
    for name, check in CHECKS:
        worst = None
        total = 0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            res = check(rng)
            total += res.n_checked
            if worst is None or res.max_rel_error > worst:
                worst = res.max_rel_error
        results.append((name, GradcheckResult(max_rel_error=worst,
                                              passed=worst <= tol,
                                              tol=tol, n_checked=total)))
    return results
