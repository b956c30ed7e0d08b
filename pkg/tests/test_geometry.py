import numpy as np
import pytest

from interlace.autodiff import Tensor, gradcheck, tsum
from interlace.geometry import (
    ConvParams,
    InputError,
    MlpParams,
    backproject_coordinate_map,
    coordinate_embedding,
    pooled_pose_embedding,
    supervoxel_average_pool,
    supervoxel_partition,
    view_featurize,
)
from interlace.scenes import (
    PointCloud,
    SceneRecipe,
    generate_scene,
    render_view,
)


def cloud_from_xyz(xyz: np.ndarray) -> PointCloud:
    pts = np.hstack([xyz, np.zeros_like(xyz)])
    return PointCloud(points=pts, labels=np.zeros(len(xyz), dtype=np.int64))


def test_single_cell_partition():
    xyz = np.random.default_rng(0).random((50, 3)) * 0.2
    part = supervoxel_partition(cloud_from_xyz(xyz), cell_size=0.25)
    assert part.n_supervoxels == 1
    assert np.all(part.assignment == 0)


def test_far_apart_points_are_singletons():
    cell = 0.25
    xyz = np.arange(20)[:, None] * np.ones(3) * cell * 2.0
    part = supervoxel_partition(cloud_from_xyz(xyz), cell_size=cell)
    assert part.n_supervoxels == 20
    assert len(np.unique(part.assignment)) == 20


def test_partition_deterministic():
    xyz = np.random.default_rng(1).random((200, 3)) * 3.0
    a = supervoxel_partition(cloud_from_xyz(xyz), 0.4)
    b = supervoxel_partition(cloud_from_xyz(xyz), 0.4)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert a.n_supervoxels == b.n_supervoxels


def test_pool_single_supervoxel_is_column_mean():
    xyz = np.zeros((4, 3))
    part = supervoxel_partition(cloud_from_xyz(xyz), 1.0)
    feats = Tensor(np.arange(8.0).reshape(4, 2))
    out = supervoxel_average_pool(feats, part)
    np.testing.assert_allclose(out.data, feats.data.mean(axis=0, keepdims=True))


def test_pool_identity_partition():
    cell = 0.25
    xyz = np.arange(5)[:, None] * np.ones(3) * cell * 2.0
    part = supervoxel_partition(cloud_from_xyz(xyz), cell)
    feats = Tensor(np.random.default_rng(2).normal(size=(5, 3)))
    out = supervoxel_average_pool(feats, part)
    # rows may be reordered by the partition; compare as sets via sorting
    np.testing.assert_allclose(np.sort(out.data, axis=0),
                               np.sort(feats.data, axis=0), atol=1e-14)


def test_pool_two_rows_average():
    xyz = np.zeros((2, 3))
    part = supervoxel_partition(cloud_from_xyz(xyz), 1.0)
    out = supervoxel_average_pool(Tensor(np.array([[0.0, 2.0], [2.0, 0.0]])), part)
    np.testing.assert_allclose(out.data, [[1.0, 1.0]])


def test_coordinate_embedding_properties():
    rng = np.random.default_rng(3)
    params = MlpParams.init(rng, 3, 8, 8)
    coords = rng.normal(size=(4, 3))
    dup = np.vstack([coords, coords])
    out = coordinate_embedding(dup, params)
    np.testing.assert_allclose(out.data[:4], out.data[4:], atol=1e-14)

    zero = MlpParams(w1=Tensor(np.zeros((3, 8))), b1=Tensor(np.zeros(8)),
                     w2=Tensor(np.zeros((8, 8))), b2=Tensor(np.zeros(8)))
    out0 = coordinate_embedding(coords, zero)
    assert np.all(out0.data == 0.0)


def test_coordinate_embedding_gradcheck():
    rng = np.random.default_rng(4)
    params = MlpParams.init(rng, 3, 6, 5)
    for t in (params.w1, params.b1, params.w2, params.b2):
        t.requires_grad = True
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

    def fn(xi, w1, b1, w2, b2):
        p = MlpParams(w1=w1, b1=b1, w2=w2, b2=b2)
        out = coordinate_embedding(xi, p)
        ramp = np.linspace(0.5, 1.5, out.data.size).reshape(out.data.shape)
        return tsum(out * Tensor(ramp))

    r = gradcheck(fn, [x, params.w1, params.b1, params.w2, params.b2])
    assert r.passed, r


def test_view_featurize_shapes_and_duplicates():
    rng = np.random.default_rng(5)
    params = ConvParams.init(rng, 3, 4, 6)
    img = rng.random((1, 16, 16, 3))
    stack = np.concatenate([img, img, rng.random((1, 16, 16, 3))], axis=0)
    out = view_featurize(stack, params)
    assert out.shape == (3, 6)
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-14)
    assert not np.allclose(out.data[0], out.data[2])


def test_view_featurize_constant_color_closed_form():
    # constant image: each conv output pixel is relu(sum_over_taps color.w + b),
    # identical everywhere, so GAP returns exactly that activation
    rng = np.random.default_rng(6)
    params = ConvParams.init(rng, 3, 4, 6)
    color = np.array([0.2, 0.5, 0.8])
    img = np.tile(color, (1, 16, 16, 1))
    out = view_featurize(img, params)

    tap1 = np.tile(color, 9)  # 3x3 window of the same color
    a1 = np.maximum(tap1 @ params.w1.data + params.b1.data, 0.0)
    tap2 = np.tile(a1, 9)
    a2 = np.maximum(tap2 @ params.w2.data + params.b2.data, 0.0)
    np.testing.assert_allclose(out.data[0], a2, atol=1e-12)


def test_backproject_identity_intrinsics():
    depth = np.zeros((8, 8))
    depth[0, 0] = 1.0
    cmap = backproject_coordinate_map(depth, np.eye(3))
    np.testing.assert_allclose(cmap.xyz[0, 0], [0.0, 0.0, 1.0], atol=1e-14)
    assert cmap.valid[0, 0]


def test_backproject_hand_case():
    k = np.array([[2.0, 0.0, 1.0], [0.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
    depth = np.zeros((8, 8))
    depth[1, 3] = 4.0  # (u, v) = (3, 1)
    cmap = backproject_coordinate_map(depth, k)
    np.testing.assert_allclose(cmap.xyz[1, 3], [4.0, 0.0, 4.0], atol=1e-12)


def test_backproject_zero_depth_invalid():
    cmap = backproject_coordinate_map(np.zeros((4, 4)), np.eye(3))
    assert not cmap.valid.any()
    assert np.all(cmap.xyz == 0.0)


def test_backproject_negative_depth_rejected():
    with pytest.raises(InputError):
        backproject_coordinate_map(-np.ones((4, 4)), np.eye(3))


def test_render_backproject_round_trip():
    recipe = SceneRecipe(n_points=800, n_views=1, image_hw=(32, 32))
    for seed in range(3):
        scene = generate_scene(seed, recipe)
        view = scene.views[0]
        _, depth, pidx = render_view(scene.cloud, view.pose, view.intrinsics,
                                     view.depth.shape)
        cmap = backproject_coordinate_map(depth, view.intrinsics, view.pose)
        hit = pidx >= 0
        recovered = cmap.xyz[hit]
        original = scene.cloud.xyz[pidx[hit]]
        # tolerance: half-pixel rounding at the splat's depth
        f = min(view.intrinsics[0, 0], view.intrinsics[1, 1])
        tol = 0.5 * depth[hit].max() / f + 1e-9
        assert np.abs(recovered - original).max() <= 2.0 * tol


def test_pooled_pose_embedding_rows():
    rng = np.random.default_rng(8)
    params = MlpParams.init(rng, 3, 8, 8)
    depth = np.zeros((6, 6))
    depth[2, 2] = 1.5
    full = backproject_coordinate_map(depth, np.eye(3))
    empty = backproject_coordinate_map(np.zeros((6, 6)), np.eye(3))
    out = pooled_pose_embedding([full, empty], params)
    assert out.shape == (2, 8)
    np.testing.assert_allclose(out.data[1], 0.0, atol=0)
    expect = coordinate_embedding(full.xyz[full.valid], params).data.mean(axis=0)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-12)
