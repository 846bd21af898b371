"""Seeded synthetic scenes: class-colored geometry seen by a LiDAR and two cameras.

Each scene is a handful of parametric surfaces on a ground patch.  Points are
sampled on the surfaces to form the labeled cloud; cameras render the same
surfaces by projecting a dense sample set and splatting class colors with
nearest-depth wins.  Two classes ("vehicle" and "pedestrian") use *identical*
box geometry and differ only in paint, so their points cannot be told apart
from shape — only the cameras can resolve them.

The renderer also returns per-pixel label and depth maps.  Because the cloud
points are splatted alongside the dense render samples, any cloud point whose
depth is within ``OCCLUSION_TOL`` of the depth buffer at its pixel is
guaranteed to land on a pixel of its own class color: the scene layout keeps
surfaces of different classes farther apart than the tolerance along any
viewing ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import geom
from ..augment import rng_from

CLASS_NAMES = ("ground", "vehicle", "pedestrian", "pole", "building", "vegetation")
NUM_CLASSES = len(CLASS_NAMES)

# Flat paint per class; the background renders black, which no class uses.
CLASS_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],  # ground: asphalt gray
        [0.85, 0.10, 0.10],  # vehicle: red
        [0.10, 0.20, 0.85],  # pedestrian: blue (same shape as vehicle)
        [0.90, 0.85, 0.10],  # pole: yellow
        [0.60, 0.50, 0.35],  # building: tan
        [0.10, 0.70, 0.20],  # vegetation: green
    ]
)

BACKGROUND_LABEL = -1

# A cloud point is treated as visible when its depth is within this margin of
# the rendered depth buffer.  Layout keeps cross-class surfaces > 3x farther
# apart along every ray, so visibility implies the pixel wears its color.
OCCLUSION_TOL = 0.15

BOX_SIZE = (0.9, 0.9, 1.7)          # shared by vehicle and pedestrian
POLE_RADIUS, POLE_HEIGHT = 0.12, 3.2
BUILDING_SIZE = (1.5, 6.0, 3.0)
BUSH_RADIUS = 0.7
GROUND_RECT = (3.0, 16.0, -8.0, 8.0)   # x_min, x_max, y_min, y_max
GROUND_MARGIN = 0.6                    # keep-out ring around object footprints

# Fraction of the cloud budget per class (split evenly across instances).
POINT_FRACTIONS = {
    "ground": 0.22,
    "vehicle": 0.16,
    "pedestrian": 0.16,
    "pole": 0.10,
    "building": 0.20,
    "vegetation": 0.16,
}

RENDER_DENSITY = 200.0  # surface samples per square meter for the z-buffer

_TAG_LAYOUT, _TAG_ALLOC, _TAG_POINTS, _TAG_ATTRS, _TAG_SHUFFLE, _TAG_RENDER = range(6)


@dataclass
class SceneSpec:
    """Layout and budget knobs for one generated scene."""

    seed: int
    num_points: int = 512
    img_width: int = 64
    img_height: int = 48
    focal: float = 32.0
    slot_jitter: float = 0.15
    vehicle_slots: tuple = ((6.5, -3.0), (10.5, 3.5))
    pedestrian_slots: tuple = ((6.5, 3.0), (10.5, -3.5))
    pole_slots: tuple = ((5.0, 0.0), (9.0, 0.0))
    building_slots: tuple = ((13.5, 0.0),)
    vegetation_slots: tuple = ((8.5, -5.0), (8.5, 5.0))
    cameras: tuple = (("front", (0.3, 0.0, 1.6), 0.0), ("front-left", (0.2, 0.3, 1.6), 30.0))

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError(f"num_points must be positive, got {self.num_points}")
        if self.img_width < 8 or self.img_height < 8:
            raise ValueError("images smaller than 8x8 are not renderable")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")


@dataclass
class Scene:
    """A labeled cloud plus the rig that photographed it."""

    spec: SceneSpec
    cloud: geom.LidarPointCloud
    rig: geom.MultiCamRig
    pixel_labels: dict[str, np.ndarray] = field(repr=False)   # H x W, -1 = sky
    pixel_depth: dict[str, np.ndarray] = field(repr=False)    # H x W, inf = sky

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES


# ---------------------------------------------------------------------------
# surface samplers
# ---------------------------------------------------------------------------


def _sample_box(rng: np.random.Generator, n: int, center_xy, size) -> np.ndarray:
    """Uniform points on the four sides and top of an axis-aligned box (no floor)."""
    sx, sy, sz = size
    # face order: -x, +x, -y, +y, top
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])
    counts = rng.multinomial(n, areas / areas.sum())
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    out = np.empty((n, 3))
    i = 0
    for face, c in enumerate(counts):
        s = slice(i, i + c)
        a, b = u[s], v[s]
        if face == 0:
            out[s] = np.column_stack([np.full(c, -sx / 2), (a - 0.5) * sy, b * sz])
        elif face == 1:
            out[s] = np.column_stack([np.full(c, sx / 2), (a - 0.5) * sy, b * sz])
        elif face == 2:
            out[s] = np.column_stack([(a - 0.5) * sx, np.full(c, -sy / 2), b * sz])
        elif face == 3:
            out[s] = np.column_stack([(a - 0.5) * sx, np.full(c, sy / 2), b * sz])
        else:
            out[s] = np.column_stack([(a - 0.5) * sx, (b - 0.5) * sy, np.full(c, sz)])
        i += c
    out[:, 0] += center_xy[0]
    out[:, 1] += center_xy[1]
    return out


def _sample_cylinder(rng: np.random.Generator, n: int, center_xy, radius, height) -> np.ndarray:
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    z = rng.uniform(0.0, height, size=n)
    return np.column_stack(
        [center_xy[0] + radius * np.cos(theta), center_xy[1] + radius * np.sin(theta), z]
    )


def _sample_sphere(rng: np.random.Generator, n: int, center_xy, radius) -> np.ndarray:
    vec = rng.normal(size=(n, 3))
    vec /= np.maximum(np.linalg.norm(vec, axis=1, keepdims=True), 1e-12)
    return vec * radius + np.array([center_xy[0], center_xy[1], radius])


def _sample_ground(rng: np.random.Generator, n: int, keepouts) -> np.ndarray:
    """Uniform on the ground rectangle, redrawing points inside keep-out boxes."""
    x0, x1, y0, y1 = GROUND_RECT

    def bad(pts):
        hit = np.zeros(len(pts), dtype=bool)
        for cx, cy, hx, hy in keepouts:
            hit |= (np.abs(pts[:, 0] - cx) < hx) & (np.abs(pts[:, 1] - cy) < hy)
        return hit

    pts = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    mask = bad(pts)
    while mask.any():
        k = int(mask.sum())
        pts[mask] = np.column_stack([rng.uniform(x0, x1, k), rng.uniform(y0, y1, k)])
        mask[mask] = bad(pts[mask])
    return np.column_stack([pts, np.zeros(n)])


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def _layout(spec: SceneSpec):
    """Instances as (class_id, sampler(rng, n) -> n x 3, area, keepout)."""
    rng = rng_from(spec.seed, _TAG_LAYOUT)
    instances = []

    def jit(slot):
        return (
            slot[0] + rng.uniform(-spec.slot_jitter, spec.slot_jitter),
            slot[1] + rng.uniform(-spec.slot_jitter, spec.slot_jitter),
        )

    def box_area(size):
        sx, sy, sz = size
        return 2 * sz * (sx + sy) + sx * sy

    # The two box classes share one slot pool and are dealt out at random, so
    # *where* a box stands carries no information about which class it is —
    # only its rendered color does.
    box_slots = tuple(spec.vehicle_slots) + tuple(spec.pedestrian_slots)
    box_classes = [CLASS_NAMES.index("vehicle")] * len(spec.vehicle_slots)
    box_classes += [CLASS_NAMES.index("pedestrian")] * len(spec.pedestrian_slots)
    for cid, slot in zip(rng.permutation(box_classes), box_slots):
        c = jit(slot)
        instances.append(
            (
                int(cid),
                lambda r, n, c=c: _sample_box(r, n, c, BOX_SIZE),
                box_area(BOX_SIZE),
                (c[0], c[1], BOX_SIZE[0] / 2 + GROUND_MARGIN, BOX_SIZE[1] / 2 + GROUND_MARGIN),
            )
        )
    cid = CLASS_NAMES.index("pole")
    for slot in spec.pole_slots:
        c = jit(slot)
        instances.append(
            (
                cid,
                lambda r, n, c=c: _sample_cylinder(r, n, c, POLE_RADIUS, POLE_HEIGHT),
                2 * math.pi * POLE_RADIUS * POLE_HEIGHT,
                (c[0], c[1], POLE_RADIUS + GROUND_MARGIN, POLE_RADIUS + GROUND_MARGIN),
            )
        )
    cid = CLASS_NAMES.index("building")
    for slot in spec.building_slots:
        c = jit(slot)
        instances.append(
            (
                cid,
                lambda r, n, c=c: _sample_box(r, n, c, BUILDING_SIZE),
                box_area(BUILDING_SIZE),
                (
                    c[0],
                    c[1],
                    BUILDING_SIZE[0] / 2 + GROUND_MARGIN,
                    BUILDING_SIZE[1] / 2 + GROUND_MARGIN,
                ),
            )
        )
    cid = CLASS_NAMES.index("vegetation")
    for slot in spec.vegetation_slots:
        c = jit(slot)
        instances.append(
            (
                cid,
                lambda r, n, c=c: _sample_sphere(r, n, c, BUSH_RADIUS),
                4 * math.pi * BUSH_RADIUS**2,
                (c[0], c[1], BUSH_RADIUS + GROUND_MARGIN, BUSH_RADIUS + GROUND_MARGIN),
            )
        )

    keepouts = [inst[3] for inst in instances]
    x0, x1, y0, y1 = GROUND_RECT
    ground_area = (x1 - x0) * (y1 - y0)
    instances.append(
        (
            CLASS_NAMES.index("ground"),
            lambda r, n: _sample_ground(r, n, keepouts),
            ground_area,
            None,
        )
    )
    return instances


def _allocate(spec: SceneSpec, instances) -> np.ndarray:
    """Split the point budget across instances: per-class quota, even per instance."""
    per_class_count = np.bincount([inst[0] for inst in instances], minlength=NUM_CLASSES)
    probs = np.array(
        [POINT_FRACTIONS[CLASS_NAMES[cid]] / per_class_count[cid] for cid, *_ in instances]
    )
    probs /= probs.sum()
    return rng_from(spec.seed, _TAG_ALLOC).multinomial(spec.num_points, probs)


# ---------------------------------------------------------------------------
# cameras and rendering
# ---------------------------------------------------------------------------


def _make_camera(name: str, position, yaw_deg: float, spec: SceneSpec) -> geom.CameraModel:
    """Horizontal-looking pinhole camera: +z out of the lens along the yaw heading."""
    psi = math.radians(yaw_deg)
    right = (math.sin(psi), -math.cos(psi), 0.0)
    down = (0.0, 0.0, -1.0)
    forward = (math.cos(psi), math.sin(psi), 0.0)
    rot = np.array([right, down, forward])
    return geom.CameraModel(
        name=name,
        fx=spec.focal,
        fy=spec.focal,
        cx=(spec.img_width - 1) / 2,
        cy=(spec.img_height - 1) / 2,
        rotation=rot,
        translation=-rot @ np.asarray(position, dtype=np.float64),
        width=spec.img_width,
        height=spec.img_height,
    )


def _splat(cam: geom.CameraModel, xyz: np.ndarray, labels: np.ndarray):
    """Nearest-depth-wins rasterization; returns (image, label map, depth map)."""
    h, w = cam.height, cam.width
    label_map = np.full((h, w), BACKGROUND_LABEL, dtype=np.int16)
    depth_map = np.full((h, w), np.inf)
    u, v, depth, valid = geom.project_points(xyz, cam)
    ui = np.clip(np.rint(u[valid]).astype(np.int64), 0, w - 1)
    vi = np.clip(np.rint(v[valid]).astype(np.int64), 0, h - 1)
    lab = labels[valid]
    dep = depth[valid]
    order = np.argsort(-dep, kind="stable")  # far to near: nearest write wins
    flat = vi[order] * w + ui[order]
    label_map.reshape(-1)[flat] = lab[order]
    depth_map.reshape(-1)[flat] = dep[order]
    image = np.zeros((h, w, 3))
    lit = label_map >= 0
    image[lit] = CLASS_COLORS[label_map[lit]]
    return image, label_map, depth_map


def _render_samples(spec: SceneSpec, instances):
    """Dense surface samples (positions + labels) for the z-buffer renderer."""
    parts, labels = [], []
    for i, (cid, sampler, area, _) in enumerate(instances):
        n = max(1, int(round(area * RENDER_DENSITY)))
        parts.append(sampler(rng_from(spec.seed, _TAG_RENDER, i), n))
        labels.append(np.full(n, cid, dtype=np.int64))
    return np.vstack(parts), np.concatenate(labels)


# ---------------------------------------------------------------------------
# the generator
# ---------------------------------------------------------------------------


def generate_scene(spec: SceneSpec) -> Scene:
    """Build the labeled cloud and render every camera.  Bit-stable per seed."""
    instances = _layout(spec)
    counts = _allocate(spec, instances)

    parts, labels = [], []
    for i, ((cid, sampler, *_), n) in enumerate(zip(instances, counts)):
        if n == 0:
            continue
        parts.append(sampler(rng_from(spec.seed, _TAG_POINTS, i), int(n)))
        labels.append(np.full(int(n), cid, dtype=np.int64))
    xyz = np.vstack(parts)
    lab = np.concatenate(labels)

    attrs = rng_from(spec.seed, _TAG_ATTRS).uniform(0.0, 1.0, size=(spec.num_points, 2))
    perm = rng_from(spec.seed, _TAG_SHUFFLE).permutation(spec.num_points)
    points = np.column_stack([xyz, attrs])[perm]
    lab = lab[perm]
    cloud = geom.LidarPointCloud(points, lab, frame_id=f"scene-{spec.seed:05d}")

    render_xyz, render_lab = _render_samples(spec, instances)
    # The cloud's own points join the splat so every visible cloud point has a
    # depth-buffer entry at least as near as itself.
    all_xyz = np.vstack([render_xyz, xyz])
    all_lab = np.concatenate([render_lab, np.concatenate(labels)])

    cameras, images = [], []
    pixel_labels: dict[str, np.ndarray] = {}
    pixel_depth: dict[str, np.ndarray] = {}
    for name, position, yaw in spec.cameras:
        cam = _make_camera(name, position, yaw, spec)
        image, lmap, dmap = _splat(cam, all_xyz, all_lab)
        cameras.append(cam)
        images.append(image)
        pixel_labels[name] = lmap
        pixel_depth[name] = dmap
    rig = geom.MultiCamRig(tuple(cameras), tuple(images))
    return Scene(spec, cloud, rig, pixel_labels, pixel_depth)


def generate_dataset(base_seed: int, count: int, **spec_kwargs) -> list[Scene]:
    """``count`` scenes with consecutive seeds derived from ``base_seed``."""
    if count < 1:
        raise ValueError(f"need at least one scene, got {count}")
    return [generate_scene(SceneSpec(seed=base_seed * 1000 + i, **spec_kwargs)) for i in range(count)]
