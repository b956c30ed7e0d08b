"""Procedural labeled 3D scenes, multi-view point-splat rendering, dataset I/O.

A scene is a colored point cloud sampled from axis-aligned primitives (floor
slab, wall slabs, boxes, spheres), each primitive carrying a class whose color
palette is mixed at a configurable purity. Cameras sit on a jittered ring
around the scene center looking inward, so every object is seen from several
directions. Per-point labels are stored on disk but the training path only
ever reads the scene-level tag vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class RecipeError(ValueError):
    pass


class CameraError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray                 # M x 6: x y z r g b
    labels: np.ndarray | None = None   # M class indices, held back from training

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def rgb(self):
        return self.points[:, 3:6]


@dataclass
class CameraView:
    image: np.ndarray                  # H x W x 3 in [0, 1]
    depth: np.ndarray | None = None    # H x W, 0 marks a pixel with no geometry
    intrinsics: np.ndarray | None = None   # 3 x 3
    pose: np.ndarray | None = None     # 3 x 4 world-to-camera [R|t]


@dataclass
class Scene:
    scene_id: str
    cloud: PointCloud
    views: list[CameraView]
    tags: np.ndarray                   # C-length 0/1 vector


@dataclass
class SceneRecipe:
    n_classes: int = 4
    n_points: int = 2048
    n_views: int = 8
    image_hw: tuple = (32, 32)
    extent: float = 4.0                # scene footprint in meters
    height: float = 2.4
    palette_purity: float = 0.8        # probability a point takes its class color
    color_noise: float = 0.06
    objects_per_class: int = 2
    class_presence: float = 0.65       # per-class inclusion probability
    allowed_classes: tuple | None = None   # restrict which classes may appear

    def validate(self):
        if self.n_classes < 2:
            raise RecipeError("need at least 2 classes")
        if self.n_points < self.n_classes:
            raise RecipeError("point budget smaller than class count")
        if self.n_views < 1:
            raise RecipeError("need at least one view")
        if self.image_hw[0] < 8 or self.image_hw[1] < 8:
            raise RecipeError("resolution below 8x8")


def class_palette(n_classes: int) -> np.ndarray:
    """Fixed, well-separated base color per class (hue wheel)."""
    hues = np.arange(n_classes) / n_classes
    h6 = hues * 6.0
    k = np.floor(h6).astype(int)
    f = h6 - k
    rgb = np.zeros((n_classes, 3))
    for c in range(n_classes):
        v, p, q, t = 1.0, 0.15, 1.0 - 0.85 * f[c], 0.15 + 0.85 * f[c]
        rgb[c] = [(v, q, p, p, t, v)[k[c] % 6],
                  (t, v, v, q, p, p)[k[c] % 6],
                  (p, p, t, v, v, q)[k[c] % 6]]
    return rgb


def _sample_box(rng, center, size, n):
    """Sample n points on the surface of an axis-aligned box."""
    size = np.asarray(size, dtype=float)
    areas = np.array([size[1] * size[2], size[1] * size[2],
                      size[0] * size[2], size[0] * size[2],
                      size[0] * size[1], size[0] * size[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    pts = u * size
    for axis in range(3):
        neg, pos = 2 * axis, 2 * axis + 1
        pts[faces == neg, axis] = -size[axis] / 2
        pts[faces == pos, axis] = +size[axis] / 2
    return pts + np.asarray(center)


def _sample_sphere(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius + np.asarray(center)


def generate_scene(seed: int, recipe: SceneRecipe, scene_id: str | None = None) -> Scene:
    """Deterministically build one labeled scene with renderings and tags."""
    recipe.validate()
    rng = np.random.default_rng(seed)
    C = recipe.n_classes
    half = recipe.extent / 2.0

    allowed = list(range(C)) if recipe.allowed_classes is None \
        else sorted(set(recipe.allowed_classes))
    for c in allowed:
        if not 0 <= c < C:
            raise RecipeError(f"allowed class {c} outside [0, {C})")

    # choose which classes this scene contains (at least two, if available)
    present = [c for c in allowed if rng.random() < recipe.class_presence]
    while len(present) < min(2, len(allowed)):
        extra = [c for c in allowed if c not in present]
        present.append(extra[rng.integers(len(extra))])
    present = sorted(present)

    # one generator (surface + weight) per primitive
    primitives = []
    for c in present:
        if c == 0:
            # floor slab covering the footprint
            primitives.append((c, 4.0, lambda r, n: _sample_box(
                r, (0, 0, 0.02), (recipe.extent, recipe.extent, 0.04), n)))
        elif c == 1:
            # two wall slabs on opposite sides
            for sgn in (-1.0, 1.0):
                x = sgn * (half - 0.05)
                primitives.append((c, 1.5, lambda r, n, x=x: _sample_box(
                    r, (x, 0, recipe.height / 2),
                    (0.1, recipe.extent, recipe.height), n)))
        else:
            for _ in range(recipe.objects_per_class):
                cx, cy = rng.uniform(-half * 0.6, half * 0.6, size=2)
                if rng.random() < 0.5:
                    size = rng.uniform(0.4, 0.9, size=3)
                    cz = size[2] / 2 + 0.04
                    primitives.append((c, 1.0, lambda r, n, cx=cx, cy=cy, cz=cz,
                                       size=tuple(size): _sample_box(r, (cx, cy, cz), size, n)))
                else:
                    rad = rng.uniform(0.25, 0.5)
                    primitives.append((c, 1.0, lambda r, n, cx=cx, cy=cy, rad=rad:
                                       _sample_sphere(r, (cx, cy, rad + 0.04), rad, n)))

    if recipe.n_points < len(primitives):
        raise RecipeError(
            f"point budget {recipe.n_points} below primitive count {len(primitives)}")

    weights = np.array([w for _, w, _ in primitives])
    counts = np.maximum(1, np.floor(weights / weights.sum() * recipe.n_points).astype(int))
    while counts.sum() > recipe.n_points:
        counts[np.argmax(counts)] -= 1
    counts[np.argmax(counts)] += recipe.n_points - counts.sum()

    palette = class_palette(C)
    xyz_parts, rgb_parts, label_parts = [], [], []
    for (c, _, sample), n in zip(primitives, counts):
        pts = sample(rng, int(n))
        pure = rng.random(int(n)) < recipe.palette_purity
        colors = np.where(pure[:, None], palette[c], rng.uniform(0, 1, size=(int(n), 3)))
        colors = colors + rng.normal(scale=recipe.color_noise, size=colors.shape)
        xyz_parts.append(pts)
        rgb_parts.append(np.clip(colors, 0.0, 1.0))
        label_parts.append(np.full(int(n), c, dtype=np.int64))

    order = rng.permutation(recipe.n_points)
    cloud = PointCloud(
        points=np.concatenate([np.concatenate(xyz_parts), np.concatenate(rgb_parts)],
                              axis=1)[order],
        labels=np.concatenate(label_parts)[order],
    )

    tags = np.zeros(C, dtype=np.int64)
    tags[np.unique(cloud.labels)] = 1

    views = []
    H, W = recipe.image_hw
    intr = default_intrinsics(H, W)
    center = np.array([0.0, 0.0, recipe.height * 0.35])
    radius = half * 1.7
    for t in range(recipe.n_views):
        ang = 2 * np.pi * t / recipe.n_views + rng.uniform(-0.2, 0.2)
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang),
                        recipe.height * 0.8 + rng.uniform(-0.2, 0.2)])
        pose = look_at_pose(eye, center)
        image, depth, _ = render_view(cloud, pose, intr, (H, W))
        views.append(CameraView(image=image, depth=depth,
                                intrinsics=intr.copy(), pose=pose))

    return Scene(scene_id=scene_id or f"scene_{seed:06d}",
                 cloud=cloud, views=views, tags=tags)


def default_intrinsics(h: int, w: int) -> np.ndarray:
    """Pinhole intrinsics with a ~60 degree horizontal field of view."""
    f = w / (2.0 * np.tan(np.pi / 6))
    return np.array([[f, 0.0, (w - 1) / 2.0],
                     [0.0, f, (h - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera [R|t] with +z forward, +x right, +y down."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, -1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=0)
    t = -r @ eye
    return np.concatenate([r, t[:, None]], axis=1)


BACKGROUND = np.array([0.85, 0.85, 0.9])


def render_view(cloud: PointCloud, pose: np.ndarray, intrinsics: np.ndarray,
                resolution: tuple):
    """Splat points through a pinhole camera with z-buffering.

    Returns (image, depth, point_index); point_index is -1 where no point
    landed and depth is 0 there by convention.
    """
    h, w = resolution
    if h < 8 or w < 8:
        raise CameraError("resolution below 8x8")
    if abs(np.linalg.det(intrinsics)) < 1e-12:
        raise CameraError("singular intrinsics")

    r, t = pose[:, :3], pose[:, 3]
    pc = cloud.xyz @ r.T + t
    z = pc[:, 2]
    vis = z > 1e-6
    idx = np.nonzero(vis)[0]
    u = intrinsics[0, 0] * pc[vis, 0] / z[vis] + intrinsics[0, 2]
    v = intrinsics[1, 1] * pc[vis, 1] / z[vis] + intrinsics[1, 2]
    ui = np.round(u).astype(int)
    vi = np.round(v).astype(int)
    inb = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    idx, ui, vi = idx[inb], ui[inb], vi[inb]
    zv = z[idx]

    image = np.tile(BACKGROUND, (h, w, 1))
    depth = np.zeros((h, w))
    point_index = np.full((h, w), -1, dtype=np.int64)
    # farthest first so the nearest point wins each pixel
    order = np.argsort(-zv, kind="stable")
    image[vi[order], ui[order]] = cloud.rgb[idx[order]]
    depth[vi[order], ui[order]] = zv[order]
    point_index[vi[order], ui[order]] = idx[order]
    return image, depth, point_index


# -- on-disk format ------------------------------------------------------------
#
# dataset/
#   manifest.txt          "classes <name...>" then one "scene <dir>" per line
#   <scene>/points.tsv    rows: x y z r g b label
#   <scene>/tags.txt      C space-separated 0/1
#   <scene>/views/NNN.ppm binary 8-bit PPM
#   <scene>/views/NNN.depth  little-endian float32, H*W values
#   <scene>/views/NNN.cam    text: 3x3 intrinsics rows, then 3x4 pose rows


def write_ppm(path: Path, image: np.ndarray):
    h, w, _ = image.shape
    data = (np.clip(image, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        if not raw.startswith(b"P6"):
            raise DatasetError(f"{path}: not a binary PPM")
        fields = []
        pos = 2
        while len(fields) < 3:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                while raw[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            fields.append(int(raw[start:pos]))
        pos += 1
        w, h, maxval = fields
        pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
        if pixels.size != h * w * 3:
            raise DatasetError(f"{path}: truncated pixel data at offset {pos}")
        return pixels.reshape(h, w, 3).astype(np.float64) / maxval
    except (ValueError, IndexError) as err:
        raise DatasetError(f"{path}: malformed PPM ({err})") from err


def write_depth(path: Path, depth: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.shape[0], depth.shape[1]))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated depth header")
    h, w = struct.unpack("<II", raw[:8])
    vals = np.frombuffer(raw, dtype="<f4", offset=8)
    if vals.size != h * w:
        raise DatasetError(f"{path}: expected {h * w} floats, found {vals.size}")
    return vals.reshape(h, w).astype(np.float64)


def write_cam(path: Path, intrinsics: np.ndarray, pose: np.ndarray):
    lines = [" ".join(f"{x:.17g}" for x in row) for row in intrinsics]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in pose]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cam(path: Path):
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError as err:
            raise DatasetError(f"{path}: line {ln}: {err}") from err
    if len(rows) != 6 or any(len(rows[i]) != 3 for i in range(3)) \
            or any(len(rows[i]) != 4 for i in range(3, 6)):
        raise DatasetError(f"{path}: expected 3x3 intrinsics then 3x4 pose")
    return np.array(rows[:3]), np.array(rows[3:])


def write_dataset(scenes: list[Scene], directory, class_names: list[str] | None = None):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    n_classes = len(scenes[0].tags) if scenes else 0
    if class_names is None:
        class_names = [f"class{c}" for c in range(n_classes)]
    lines = ["classes " + " ".join(class_names)]
    for scene in scenes:
        sdir = root / scene.scene_id
        (sdir / "views").mkdir(parents=True, exist_ok=True)
        labels = scene.cloud.labels
        if labels is None:
            labels = np.full(scene.cloud.points.shape[0], -1, dtype=np.int64)
        with open(sdir / "points.tsv", "w") as fh:
            for row, lab in zip(scene.cloud.points, labels):
                fh.write("\t".join(f"{x:.17g}" for x in row) + f"\t{lab}\n")
        (sdir / "tags.txt").write_text(" ".join(str(int(x)) for x in scene.tags) + "\n")
        for i, view in enumerate(scene.views):
            write_ppm(sdir / "views" / f"{i:03d}.ppm", view.image)
            if view.depth is not None:
                write_depth(sdir / "views" / f"{i:03d}.depth", view.depth)
            if view.intrinsics is not None and view.pose is not None:
                write_cam(sdir / "views" / f"{i:03d}.cam", view.intrinsics, view.pose)
        lines.append(f"scene {scene.scene_id}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_dataset(directory) -> tuple[list[Scene], list[str]]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"{manifest}: missing manifest")
    class_names: list[str] = []
    scene_dirs: list[str] = []
    for ln, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind == "classes":
            class_names = rest.split()
        elif kind == "scene":
            scene_dirs.append(rest.strip())
        else:
            raise DatasetError(f"{manifest}: line {ln}: unknown entry '{kind}'")
    if not class_names:
        raise DatasetError(f"{manifest}: no class table")

    scenes = []
    for sdir_name in scene_dirs:
        sdir = root / sdir_name
        pts_path = sdir / "points.tsv"
        rows = []
        labels = []
        for ln, line in enumerate(pts_path.read_text().splitlines(), start=1):
            cols = line.split("\t")
            if len(cols) != 7:
                raise DatasetError(f"{pts_path}: line {ln}: expected 7 columns, got {len(cols)}")
            try:
                rows.append([float(x) for x in cols[:6]])
                labels.append(int(cols[6]))
            except ValueError as err:
                raise DatasetError(f"{pts_path}: line {ln}: {err}") from err
        if not rows:
            raise DatasetError(f"{pts_path}: empty point cloud")
        labels_arr = np.array(labels, dtype=np.int64)
        cloud = PointCloud(points=np.array(rows),
                           labels=None if (labels_arr < 0).all() else labels_arr)

        tags_path = sdir / "tags.txt"
        try:
            tags = np.array([int(x) for x in tags_path.read_text().split()], dtype=np.int64)
        except ValueError as err:
            raise DatasetError(f"{tags_path}: {err}") from err
        if tags.size != len(class_names):
            raise DatasetError(f"{tags_path}: {tags.size} tags for {len(class_names)} classes")

        views = []
        for ppm in sorted((sdir / "views").glob("*.ppm")):
            image = read_ppm(ppm)
            depth_path = ppm.with_suffix(".depth")
            cam_path = ppm.with_suffix(".cam")
            depth = read_depth(depth_path) if depth_path.exists() else None
            intr = pose = None
            if cam_path.exists():
                intr, pose = read_cam(cam_path)
            views.append(CameraView(image=image, depth=depth, intrinsics=intr, pose=pose))
        if not views:
            raise DatasetError(f"{sdir}: no views")
        scenes.append(Scene(scene_id=sdir_name, cloud=cloud, views=views, tags=tags))
    if not scenes:
        raise DatasetError(f"{manifest}: dataset lists no scenes")
    return scenes, class_names
