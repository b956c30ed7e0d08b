"""Full model assembly: featurizers, both encoders, decoder, and the per-scene
forward pass producing losses, traces, and activation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camseg
from .autodiff import Tensor, init_uniform, no_grad
from .config import Config
from .decoder import DecoderLosses, DecoderTrace, InterlacedBlock, decode, decoder_loss
from .encoder import (
    EncoderLayerParams,
    EncoderLosses,
    EncoderTrace,
    class_aware_cam,
    class_token_scores,
    encode,
    encoder_loss,
)
from .geometry import (
    ConvParams,
    MlpParams,
    SupervoxelPartition,
    backproject_coordinate_map,
    coordinate_embedding,
    pooled_pose_embedding,
    supervoxel_average_pool,
    supervoxel_partition,
    view_featurize,
)
from .scenes import Scene


@dataclass
class SceneForward:
    loss: Tensor
    enc_losses: EncoderLosses
    dec_losses: DecoderLosses | None
    trace_3d: EncoderTrace
    trace_2d: EncoderTrace | None
    dec_trace: DecoderTrace | None
    cam_3d: Tensor             # S x C
    cam_2d: Tensor | None      # T x C
    scene_scores: np.ndarray   # C logits used for pseudo-label suppression


class Model:
    """Owns every learnable tensor and the scene-level forward pass."""

    def __init__(self, cfg: Config):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, c = cfg.dim, cfg.n_classes

        self.feat_3d = MlpParams.init(rng, 6, d, d)       # xyz+rgb point features
        self.emb_3d = MlpParams.init(rng, 3, d, d)        # coordinate embedding
        self.conv_2d = ConvParams.init(rng, 3, cfg.conv_mid, d)
        self.pos_2d = init_uniform(rng, (cfg.views, d), d)
        self.class_3d = init_uniform(rng, (c, d), d)
        self.class_2d = init_uniform(rng, (c, d), d)
        self.cam3d_w = init_uniform(rng, (d, c), d)
        self.cam3d_b = init_uniform(rng, (c,), d)
        self.cam2d_w = init_uniform(rng, (d, c), d)
        self.cam2d_b = init_uniform(rng, (c,), d)
        self.enc_3d = [EncoderLayerParams.init(rng, d, cfg.mlp_width)
                       for _ in range(cfg.enc_layers)]
        self.enc_2d = [EncoderLayerParams.init(rng, d, cfg.mlp_width)
                       for _ in range(cfg.enc_layers)]
        self.dec_blocks = [InterlacedBlock.init(rng, d, cfg.mlp_width)
                           for _ in range(cfg.blocks)]

    # -- parameter registry ------------------------------------------------

    def parameters_3d(self) -> dict:
        out = {}
        out.update(self.feat_3d.named("feat3d"))
        out.update(self.emb_3d.named("emb3d"))
        out["class3d"] = self.class_3d
        out["cam3d.w"] = self.cam3d_w
        out["cam3d.b"] = self.cam3d_b
        for i, layer in enumerate(self.enc_3d):
            out.update(layer.named(f"enc3d.{i}"))
        return out

    def parameters_2d(self) -> dict:
        out = {}
        out.update(self.conv_2d.named("conv2d"))
        out["pos2d"] = self.pos_2d
        out["class2d"] = self.class_2d
        out["cam2d.w"] = self.cam2d_w
        out["cam2d.b"] = self.cam2d_b
        for i, layer in enumerate(self.enc_2d):
            out.update(layer.named(f"enc2d.{i}"))
        for i, block in enumerate(self.dec_blocks):
            out.update(block.named(f"dec.{i}"))
        return out

    def parameters(self, three_d_only: bool | None = None) -> dict:
        if three_d_only is None:
            three_d_only = self.cfg.three_d_only
        out = self.parameters_3d()
        if not three_d_only:
            out.update(self.parameters_2d())
        return out

    # -- forward -------------------------------------------------------------

    def forward_scene(self, scene: Scene, view_indices: np.ndarray,
                      partition: SupervoxelPartition | None = None) -> SceneForward:
        cfg = self.cfg
        if partition is None:
            partition = supervoxel_partition(scene.cloud, cfg.cell_size)

        # 3D branch: per-point features and coordinate embedding, pooled
        points = Tensor(scene.cloud.points)
        feats = coordinate_embedding(points, self.feat_3d)
        pos = coordinate_embedding(Tensor(scene.cloud.xyz), self.emb_3d)
        sv_feats = supervoxel_average_pool(feats, partition)
        sv_pos = supervoxel_average_pool(pos, partition)
        trace_3d = encode(sv_feats, sv_pos, self.class_3d, self.enc_3d, cfg.heads)
        cam_3d, cam3d_scores = class_aware_cam(trace_3d.data_tokens(),
                                               self.cam3d_w, self.cam3d_b)

        trace_2d = dec_trace = cam_2d = None
        cam2d_scores = None
        dec_losses = None
        if not cfg.three_d_only:
            views = [scene.views[i] for i in view_indices]
            images = np.stack([v.image for v in views])
            view_feats = view_featurize(images, self.conv_2d)
            if cfg.pose_extension:
                cmaps = [backproject_coordinate_map(v.depth, v.intrinsics, v.pose)
                         for v in views]
                view_feats = view_feats + pooled_pose_embedding(cmaps, self.emb_3d)
            pos_2d = self.pos_2d[:len(views), :]
            trace_2d = encode(view_feats, pos_2d, self.class_2d, self.enc_2d,
                              cfg.heads)
            cam_2d, cam2d_scores = class_aware_cam(trace_2d.data_tokens(),
                                                   self.cam2d_w, self.cam2d_b)
            dec_trace = decode(trace_3d.tokens, trace_2d.tokens, self.dec_blocks,
                               cfg.heads, cfg.n_classes)
            dec_losses = decoder_loss(dec_trace, scene.tags, cfg.alpha)

        enc_losses = encoder_loss(trace_3d, cam3d_scores, trace_2d, cam2d_scores,
                                  scene.tags)
        loss = enc_losses.total * cfg.enc_weight
        if dec_losses is not None:
            loss = loss + dec_losses.total * cfg.dec_weight

        scores_3d = class_token_scores(trace_3d.class_tokens()).data
        scene_scores = 0.5 * (scores_3d + cam3d_scores.data)
        return SceneForward(loss=loss, enc_losses=enc_losses, dec_losses=dec_losses,
                            trace_3d=trace_3d, trace_2d=trace_2d, dec_trace=dec_trace,
                            cam_3d=cam_3d, cam_2d=cam_2d, scene_scores=scene_scores)

    # -- inference --------------------------------------------------------

    def infer_scene(self, scene: Scene, partition: SupervoxelPartition | None = None):
        """Refined/fused CAM and pseudo labels for one scene (no gradients)."""
        cfg = self.cfg
        if partition is None:
            partition = supervoxel_partition(scene.cloud, cfg.cell_size)
        n_views = min(cfg.views, len(scene.views))
        with no_grad():
            fwd = self.forward_scene(scene, np.arange(n_views), partition)
        k = min(cfg.cam_layers, cfg.enc_layers)
        refined = camseg.refine_cam_encoder(fwd.cam_3d.data, fwd.trace_3d, k=k)
        if fwd.dec_trace is not None:
            refined_dec = camseg.refine_cam_decoder(fwd.cam_3d.data, fwd.dec_trace)
            fused = camseg.fuse_cams(refined, refined_dec)
        else:
            fused = refined
        labels = camseg.pseudo_labels(fused, fwd.scene_scores, partition,
                                      threshold=cfg.threshold)
        return labels, fused, fwd, partition
