"""Grid sampling, train-time augmentation, and LiDAR test-time augmentation.

Every random operation takes an explicit ``numpy.random.Generator``; nothing
here touches global RNG state.  Use :func:`rng_from` to derive independent,
reproducible streams from a run seed and a structural path such as
``(epoch, frame)``.

Each augmentation is split into a ``sample_*`` step (draws parameters, returns
a transform record) and an ``apply_*`` step (deterministic given the record),
so tests can force exact parameters and the training loop can keep the records
for point/pixel correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .geom import LidarPointCloud, bilinear_sample

FLIP_SIGNS = {
    "none": (1.0, 1.0),
    "x": (-1.0, 1.0),
    "y": (1.0, -1.0),
    "xy": (-1.0, -1.0),
}


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """A counter-based generator for (seed, path); equal inputs, equal stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=path)))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass
class LidarAugConfig:
    rot_range: tuple[float, float] = (-np.pi / 4, np.pi / 4)
    trans_sigma: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rot_range
        if not (-np.pi <= lo <= hi <= np.pi):
            raise ValueError(f"rotation range {self.rot_range} must sit inside [-pi, pi]")
        if self.trans_sigma < 0:
            raise ValueError("translation sigma must be non-negative")
        s0, s1 = self.scale_range
        if not (0 < s0 <= s1):
            raise ValueError(f"scale range {self.scale_range} must satisfy 0 < min <= max")


@dataclass
class ImageAugConfig:
    scale_range: tuple[float, float] = (1.0, 1.5)
    rot_range_deg: tuple[float, float] = (-1.0, 1.0)
    crop_h: int = 640
    crop_w: int = 960
    jitter: tuple[float, float, float, float] = (0.3, 0.3, 0.3, 0.1)
    seed: int = 0

    def __post_init__(self):
        s0, s1 = self.scale_range
        if not (0 < s0 <= s1):
            raise ValueError(f"scale range {self.scale_range} must satisfy 0 < min <= max")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ValueError("crop size must be at least one pixel")
        if any(not 0 <= j <= 1 for j in self.jitter):
            raise ValueError(f"jitter components {self.jitter} must lie in [0, 1]")


@dataclass
class TtaVariant:
    """One coordinate-only transform: kind plus a fixed or to-be-drawn parameter.

    ``param=None`` means "draw from the family's range when the variants are
    resolved"; a concrete value forces it.
    """

    kind: str  # identity | flip | rot | scale | trans
    param: object = None

    def __post_init__(self):
        kinds = ("identity", "flip", "rot", "scale", "trans")
        if self.kind not in kinds:
            raise ValueError(f"unknown TTA kind {self.kind!r}, expected one of {kinds}")
        if self.kind == "flip" and self.param is not None and self.param not in FLIP_SIGNS:
            raise ValueError(f"flip axis {self.param!r} not in {sorted(FLIP_SIGNS)}")


@dataclass
class TtaConfig:
    variants: Sequence[TtaVariant] = ()
    include_identity: bool = True
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: tuple[float, float] = (-np.pi / 4, np.pi / 4)
    trans_sigma: float = 0.5

    def __post_init__(self):
        self.variants = list(self.variants)
        if not self.variants and not self.include_identity:
            raise ValueError("TTA config needs at least one variant")


def tta_config_for_count(k: int) -> TtaConfig:
    """Identity plus k-1 random variants cycling flip/rot/scale/trans."""
    if k < 1:
        raise ValueError("variant count must be at least 1")
    kinds = ["flip", "rot", "scale", "trans"]
    extra = [TtaVariant(kinds[i % 4]) for i in range(k - 1)]
    return TtaConfig(variants=extra, include_identity=True)


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------


def grid_sample(cloud: LidarPointCloud, cell: float):
    """Keep one point per cubic cell: the member with the lowest original index.

    Returns ``(sampled, kept, inverse)`` where ``kept`` holds the retained
    original indices (ascending) and ``inverse[i]`` is the row in ``sampled``
    that represents original point ``i`` — so per-point predictions broadcast
    back as ``pred_full = pred_sampled[inverse]``.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cells = np.floor(cloud.xyz / cell).astype(np.int64)
    _, first_idx, inv = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first_idx, kind="stable")
    kept = first_idx[order]
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    inverse = rank[inv]
    labels = cloud.labels[kept] if cloud.labels is not None else None
    sampled = LidarPointCloud(cloud.points[kept], labels, cloud.frame_id)
    return sampled, kept, inverse


# ---------------------------------------------------------------------------
# LiDAR augmentation
# ---------------------------------------------------------------------------


@dataclass
class LidarTransform:
    """Rotation about z by theta, then translation, then uniform scaling."""

    theta: float = 0.0
    delta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(3)

    def apply_xyz(self, xyz: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return (xyz @ rot.T + self.delta) * self.scale


def sample_lidar_transform(cfg: LidarAugConfig, rng: np.random.Generator) -> LidarTransform:
    theta = rng.uniform(*cfg.rot_range)
    delta = rng.normal(0.0, cfg.trans_sigma, size=3)
    scale = rng.uniform(*cfg.scale_range)
    return LidarTransform(theta, delta, scale)


def apply_lidar_transform(cloud: LidarPointCloud, tf: LidarTransform) -> LidarPointCloud:
    return cloud.with_xyz(tf.apply_xyz(cloud.xyz))


def augment_lidar(cloud: LidarPointCloud, cfg: LidarAugConfig, rng: np.random.Generator):
    """Random rotate/translate/scale; intensity, elongation and labels untouched."""
    tf = sample_lidar_transform(cfg, rng)
    return apply_lidar_transform(cloud, tf), tf


# ---------------------------------------------------------------------------
# image augmentation
# ---------------------------------------------------------------------------

# Post-geometry hooks applied before the final clamp.  The lone default stands
# in for JPEG re-compression, which is deliberately a no-op here; swap in a
# real codec by replacing the entry.
IMAGE_POST_HOOKS: list[Callable[[np.ndarray], np.ndarray]] = []


def jpeg_compression_hook(img: np.ndarray) -> np.ndarray:
    return img


IMAGE_POST_HOOKS.append(jpeg_compression_hook)


@dataclass
class ImageTransform:
    """Scale -> rotate -> crop -> jitter, with the resulting pixel affine.

    ``affine`` is the 2x3 matrix taking ORIGINAL image pixel coordinates to
    output coordinates, so LiDAR points projected with the original camera
    model can be located in the augmented image.
    """

    scale: float = 1.0
    angle_deg: float = 0.0
    crop_xy: tuple[int, int] = (0, 0)  # (left, top)
    crop_hw: tuple[int, int] = (0, 0)  # (0, 0) means "full image"
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    in_hw: tuple[int, int] = (0, 0)

    @property
    def affine(self) -> np.ndarray:
        h, w = self.in_hw
        sh, sw = scaled_size(h, w, self.scale)
        su = 1.0 if w <= 1 else (sw - 1) / (w - 1)
        sv = 1.0 if h <= 1 else (sh - 1) / (h - 1)
        a = np.array([[su, 0.0, 0.0], [0.0, sv, 0.0], [0.0, 0.0, 1.0]])
        t = np.radians(self.angle_deg)
        c, s = np.cos(t), np.sin(t)
        cx, cy = (sw - 1) / 2.0, (sh - 1) / 2.0
        rot = np.array(
            [[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0.0, 0.0, 1.0]]
        )
        left, top = self.crop_xy
        crop = np.array([[1.0, 0.0, -left], [0.0, 1.0, -top], [0.0, 0.0, 1.0]])
        return (crop @ rot @ a)[:2]


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def _resample(img: np.ndarray, out_hw: tuple[int, int], inv_affine: np.ndarray) -> np.ndarray:
    """Bilinear warp: output pixel p samples the input at ``inv_affine @ (p, 1)``.

    Coordinates are clamped to the input frame, which edge-pads the sliver a
    small rotation sweeps in.
    """
    oh, ow = out_hw
    h, w = img.shape[:2]
    uu, vv = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    coords = np.stack([uu.ravel(), vv.ravel(), np.ones(oh * ow)], axis=1) @ inv_affine.T
    su = np.clip(coords[:, 0], 0.0, w - 1)
    sv = np.clip(coords[:, 1], 0.0, h - 1)
    flat = bilinear_sample(np.moveaxis(img, 2, 0), su, sv)
    return flat.reshape(oh, ow, 3)


def sample_image_transform(
    img_hw: tuple[int, int], cfg: ImageAugConfig, rng: np.random.Generator
) -> ImageTransform:
    h, w = img_hw
    scale = rng.uniform(*cfg.scale_range)
    angle = rng.uniform(*cfg.rot_range_deg)
    sh, sw = scaled_size(h, w, scale)
    if cfg.crop_h > sh or cfg.crop_w > sw:
        raise ValueError(
            f"crop {cfg.crop_h}x{cfg.crop_w} exceeds scaled image {sh}x{sw} "
            f"(input {h}x{w}, scale {scale:.3f})"
        )
    top = int(rng.integers(0, sh - cfg.crop_h + 1))
    left = int(rng.integers(0, sw - cfg.crop_w + 1))
    jb, jc, js, jh = cfg.jitter
    return ImageTransform(
        scale=scale,
        angle_deg=angle,
        crop_xy=(left, top),
        crop_hw=(cfg.crop_h, cfg.crop_w),
        brightness=rng.uniform(1 - jb, 1 + jb),
        contrast=rng.uniform(1 - jc, 1 + jc),
        saturation=rng.uniform(1 - js, 1 + js),
        hue=rng.uniform(-jh, jh),
        in_hw=(h, w),
    )


def _color_jitter(img: np.ndarray, tf: ImageTransform) -> np.ndarray:
    out = img * tf.brightness
    if tf.contrast != 1.0:
        gray = out.mean()
        out = gray + (out - gray) * tf.contrast
    if tf.saturation != 1.0:
        lum = out @ np.array([0.299, 0.587, 0.114])
        out = lum[..., None] + (out - lum[..., None]) * tf.saturation
    if tf.hue != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + tf.hue) % 1.0
        out = hsv_to_rgb(hsv)
    return out


def apply_image_transform(img: np.ndarray, tf: ImageTransform) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if tf.in_hw != (h, w):
        raise ValueError(f"transform was sampled for {tf.in_hw}, image is {(h, w)}")
    ch, cw = tf.crop_hw if tf.crop_hw != (0, 0) else scaled_size(h, w, tf.scale)
    fwd = np.vstack([tf.affine, [0.0, 0.0, 1.0]])
    out = _resample(img, (ch, cw), np.linalg.inv(fwd)[:2])
    out = _color_jitter(out, tf)
    for hook in IMAGE_POST_HOOKS:
        out = hook(out)
    return np.clip(out, 0.0, 1.0)


def augment_image(img: np.ndarray, cfg: ImageAugConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_image_transform(img, sample_image_transform(img.shape[:2], cfg, rng))


# ---------------------------------------------------------------------------
# test-time augmentation (LiDAR only)
# ---------------------------------------------------------------------------


def _resolve_variant(v: TtaVariant, cfg: TtaConfig, rng: np.random.Generator) -> TtaVariant:
    if v.param is not None or v.kind == "identity":
        return v
    if v.kind == "flip":
        return TtaVariant("flip", str(rng.choice(["x", "y", "xy"])))
    if v.kind == "rot":
        return TtaVariant("rot", float(rng.uniform(*cfg.rot_range)))
    if v.kind == "scale":
        return TtaVariant("scale", float(rng.uniform(*cfg.scale_range)))
    return TtaVariant("trans", rng.normal(0.0, cfg.trans_sigma, size=3))


def apply_tta_variant(cloud: LidarPointCloud, v: TtaVariant) -> LidarPointCloud:
    """Coordinate-only map; point order, count, attributes and labels preserved."""
    if v.kind == "identity":
        return cloud.with_xyz(cloud.xyz)
    if v.kind == "flip":
        sx, sy = FLIP_SIGNS[v.param]
        return cloud.with_xyz(cloud.xyz * np.array([sx, sy, 1.0]))
    if v.kind == "rot":
        return apply_lidar_transform(cloud, LidarTransform(theta=float(v.param)))
    if v.kind == "scale":
        return cloud.with_xyz(cloud.xyz * float(v.param))
    if v.kind == "trans":
        return cloud.with_xyz(cloud.xyz + np.asarray(v.param, dtype=np.float64))
    raise ValueError(f"unknown TTA kind {v.kind!r}")


def make_tta_variants(cloud: LidarPointCloud, cfg: TtaConfig, rng: np.random.Generator):
    """Transformed copies of the cloud, one per variant, identity first if enabled."""
    variants = list(cfg.variants)
    if cfg.include_identity:
        variants = [TtaVariant("identity")] + variants
    out = []
    for v in variants:
        resolved = _resolve_variant(v, cfg, rng)
        out.append((apply_tta_variant(cloud, resolved), resolved))
    return out


def aggregate_tta_logits(logits_k) -> np.ndarray:
    """Arithmetic mean over the variant axis of a K x N x C stack."""
    arr = np.asarray(logits_k, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected K x N x C logits, got shape {arr.shape}")
    return arr.mean(axis=0)
