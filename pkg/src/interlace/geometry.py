"""From raw scene data to tokens.

Supervoxels are deterministic grid clusters: points sharing a quantized
(x, y, z) cell form one token. Per-point features and coordinate embeddings
are average-pooled over that partition. Views are featurized by a small
two-layer strided conv net with global average pooling. Depth maps
backproject to per-pixel 3D coordinates through the inverse intrinsics.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    init_uniform,
    matmul,
    relu,
    segment_mean,
    take_flat,
    tmean,
)
from .scenes import CameraError, PointCloud


class InputError(ValueError):
    pass


@dataclass
class SupervoxelPartition:
    assignment: np.ndarray    # M point -> supervoxel indices in [0, S)
    n_supervoxels: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_supervoxels)


def supervoxel_partition(cloud: PointCloud, cell_size: float) -> SupervoxelPartition:
    """Group points by occupied cell of a regular grid of the given pitch."""
    if cell_size <= 0:
        raise InputError("cell_size must be positive")
    xyz = cloud.xyz
    if not np.all(np.isfinite(xyz)):
        raise InputError("non-finite point coordinates")
    cells = np.floor(xyz / cell_size).astype(np.int64)
    _, assignment = np.unique(cells, axis=0, return_inverse=True)
    return SupervoxelPartition(assignment=assignment,
                               n_supervoxels=int(assignment.max()) + 1)


def supervoxel_average_pool(features: Tensor, partition: SupervoxelPartition) -> Tensor:
    """Mean of member rows per supervoxel; gradient spreads 1/|group|."""
    if features.shape[0] != partition.assignment.shape[0]:
        raise ShapeError(
            f"{features.shape[0]} feature rows vs {partition.assignment.shape[0]} points")
    return segment_mean(features, partition.assignment, partition.n_supervoxels)


@dataclass
class MlpParams:
    """Two linear layers with a ReLU in between (pointwise / 1x1)."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def init(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> "MlpParams":
        return MlpParams(
            w1=init_uniform(rng, (d_in, d_hidden), d_in),
            b1=init_uniform(rng, (d_hidden,), d_in),
            w2=init_uniform(rng, (d_hidden, d_out), d_hidden),
            b2=init_uniform(rng, (d_out,), d_hidden),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}

    def apply(self, x: Tensor) -> Tensor:
        return matmul(relu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


def coordinate_embedding(coords: Tensor | np.ndarray, params: MlpParams) -> Tensor:
    """Per-row embedding of 3D (or 6D) inputs; pure across rows."""
    coords = coords if isinstance(coords, Tensor) else Tensor(coords)
    if not np.all(np.isfinite(coords.data)):
        raise InputError("non-finite coordinates")
    return params.apply(coords)


# -- view featurizer -----------------------------------------------------------


@dataclass
class ConvParams:
    """Two valid-padding stride-2 3x3 conv layers, ReLU after each,
    then global average pooling over the remaining spatial grid."""
    w1: Tensor    # (9 * c_in) x c_mid
    b1: Tensor
    w2: Tensor    # (9 * c_mid) x d_out
    b2: Tensor
    c_mid: int

    KERNEL = 3
    STRIDE = 2

    @staticmethod
    def init(rng: np.random.Generator, c_in: int, c_mid: int, d_out: int) -> "ConvParams":
        k2 = ConvParams.KERNEL * ConvParams.KERNEL
        return ConvParams(
            w1=init_uniform(rng, (k2 * c_in, c_mid), k2 * c_in),
            b1=init_uniform(rng, (c_mid,), k2 * c_in),
            w2=init_uniform(rng, (k2 * c_mid, d_out), k2 * c_mid),
            b2=init_uniform(rng, (d_out,), k2 * c_mid),
            c_mid=c_mid,
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def _out_extent(n: int) -> int:
    return (n - ConvParams.KERNEL) // ConvParams.STRIDE + 1


@lru_cache(maxsize=32)
def _im2col_indices(t: int, h: int, w: int, c: int) -> tuple:
    """Flat gather indices turning (T,H,W,C) into (T*Ho*Wo, K*K*C) patches."""
    k, s = ConvParams.KERNEL, ConvParams.STRIDE
    ho, wo = _out_extent(h), _out_extent(w)
    if ho < 1 or wo < 1:
        raise InputError(f"resolution {h}x{w} below the conv receptive field")
    ti = np.arange(t)[:, None, None, None, None, None]
    yi = (np.arange(ho) * s)[None, :, None, None, None, None] \
        + np.arange(k)[None, None, None, :, None, None]
    xi = (np.arange(wo) * s)[None, None, :, None, None, None] \
        + np.arange(k)[None, None, None, None, :, None]
    ci = np.arange(c)[None, None, None, None, None, :]
    flat = ((ti * h + yi) * w + xi) * c + ci
    return flat.reshape(t * ho * wo, k * k * c), ho, wo


def _conv_layer(x: Tensor, t: int, h: int, w: int, c_in: int,
                weight: Tensor, bias: Tensor) -> tuple:
    idx, ho, wo = _im2col_indices(t, h, w, c_in)
    patches = take_flat(x, idx)
    return relu(matmul(patches, weight) + bias), ho, wo


def view_featurize(images: np.ndarray, params: ConvParams) -> Tensor:
    """Pool each of T images into one feature row: conv-ReLU twice, then GAP."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected T x H x W x 3 images, got {images.shape}")
    t, h, w, _ = images.shape
    x = Tensor(images)
    a1, h1, w1 = _conv_layer(x, t, h, w, 3, params.w1, params.b1)
    a1 = a1.reshape((t * h1 * w1, params.c_mid))
    a2, h2, w2 = _conv_layer(a1, t, h1, w1, params.c_mid, params.w2, params.b2)
    d_out = params.w2.shape[1]
    spatial = a2.reshape((t, h2 * w2, d_out))
    return tmean(spatial, axis=1)


# -- depth backprojection --------------------------------------------------


@dataclass
class CoordinateMap:
    xyz: np.ndarray      # H x W x 3
    valid: np.ndarray    # H x W boolean; invalid pixels carry (0, 0, 0)


def backproject_coordinate_map(depth: np.ndarray, intrinsics: np.ndarray,
                               pose: np.ndarray | None = None) -> CoordinateMap:
    """Per-pixel 3D coordinate x(u, v) = d(u, v) * K^-1 [u, v, 1]^T.

    Depth 0 marks an invalid pixel. When the world-to-camera pose [R|t] is
    given, coordinates are mapped back to the world frame.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if abs(np.linalg.det(intrinsics)) < 1e-12:
        raise CameraError("singular intrinsics")
    if np.any(depth < 0):
        raise InputError("negative depth")
    h, w = depth.shape
    kinv = np.linalg.inv(intrinsics)
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ kinv.T
    xyz = rays * depth[:, :, None]
    valid = depth > 0
    if pose is not None:
        r, t = pose[:, :3], pose[:, 3]
        xyz = (xyz - t) @ r
    xyz = np.where(valid[:, :, None], xyz, 0.0)
    return CoordinateMap(xyz=xyz, valid=valid)


def pooled_pose_embedding(coordinate_maps: list[CoordinateMap],
                          params: MlpParams) -> Tensor:
    """Mean of the coordinate embedding over each view's valid pixels.

    Used by the pose extension: the result is added to the pooled view
    features before 2D encoding. Views with no valid pixel contribute zeros.
    """
    rows = []
    for cmap in coordinate_maps:
        pts = cmap.xyz[cmap.valid]
        if pts.shape[0] == 0:
            d_out = params.w2.shape[1]
            rows.append(Tensor(np.zeros((1, d_out))))
        else:
            rows.append(tmean(coordinate_embedding(pts, params), axis=0,
                              keepdims=True))
    from .autodiff import concat
    return concat(rows, axis=0)
