"""Sensor data model: point clouds, pinhole cameras, projection and sampling.

Coordinate conventions
----------------------
LiDAR points live in a right-handed vehicle frame (x forward, y left, z up).
A camera's extrinsic (R, t) maps LiDAR coordinates into the camera frame,
where +z looks out of the lens, +x is image-right and +y is image-down.
Pixel coordinates are continuous, with (0, 0) at the center of the top-left
texel, so a W-pixel row spans [0, W-1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .nn import DiffArray

CAMERA_NAMES = ("front", "front-left", "front-right", "side-left", "side-right")

MIN_VALID_DEPTH = 0.1

POINT_CLOUD_MAGIC = b"VFS3PC\x00\x00"
POINT_CLOUD_VERSION = 1


@dataclass
class LidarPointCloud:
    """N point records (x, y, z, intensity, elongation) with optional labels."""

    points: np.ndarray
    labels: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 5:
            raise ValueError(f"points must be (N, 5), got {self.points.shape}")
        if not np.all(np.isfinite(self.points[:, :3])):
            raise ValueError("point coordinates must be finite")
        attrs = self.points[:, 3:5]
        if attrs.size and (attrs.min() < 0.0 or attrs.max() > 1.0):
            raise ValueError("intensity and elongation must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError(
                    f"labels shape {self.labels.shape} does not match {self.points.shape[0]} points"
                )
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative class ids")

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def with_xyz(self, xyz: np.ndarray) -> "LidarPointCloud":
        """A copy with replaced coordinates; attributes and labels carry over."""
        pts = self.points.copy()
        pts[:, :3] = xyz
        labels = None if self.labels is None else self.labels.copy()
        return LidarPointCloud(pts, labels, self.frame_id)


@dataclass
class RangeBox:
    min_x: float = -75.2
    min_y: float = -75.2
    min_z: float = -4.0
    max_x: float = 75.2
    max_y: float = 75.2
    max_z: float = 2.0

    def __post_init__(self):
        for lo, hi, ax in (
            (self.min_x, self.max_x, "x"),
            (self.min_y, self.max_y, "y"),
            (self.min_z, self.max_z, "z"),
        ):
            if not lo < hi:
                raise ValueError(f"range box must have min < max on {ax}: {lo} >= {hi}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.min_x, self.min_y, self.min_z])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.max_x, self.max_y, self.max_z])


@dataclass
class CameraModel:
    """Pinhole camera with a rigid LiDAR-to-camera extrinsic."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int = 960
    height: int = 640

    def __post_init__(self):
        if self.name not in CAMERA_NAMES:
            raise ValueError(f"camera name {self.name!r} not in {CAMERA_NAMES}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ValueError(f"camera {self.name}: rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")


@dataclass
class MultiCamRig:
    """An ordered set of cameras plus their current H×W×3 images in [0, 1]."""

    cameras: Sequence[CameraModel]
    images: Sequence[np.ndarray]

    def __post_init__(self):
        self.cameras = list(self.cameras)
        self.images = [np.asarray(im, dtype=np.float64) for im in self.images]
        if not self.cameras:
            raise ValueError("rig needs at least one camera")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValueError(f"camera names must be unique, got {names}")
        if len(self.images) != len(self.cameras):
            raise ValueError("one image per camera required")
        for cam, im in zip(self.cameras, self.images):
            if im.ndim != 3 or im.shape[2] != 3:
                raise ValueError(f"image for {cam.name} must be H×W×3, got {im.shape}")


@dataclass
class ImageNormConfig:
    mean: np.ndarray = field(
        default_factory=lambda: np.array([0.40789654, 0.44719302, 0.47026115])
    )
    std: np.ndarray = field(
        default_factory=lambda: np.array([0.28863828, 0.27408164, 0.27809835])
    )

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(self.std <= 0):
            raise ValueError("std components must be positive")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def crop_to_range(cloud: LidarPointCloud, box: RangeBox) -> LidarPointCloud:
    """Keep points with min <= coord < max on every axis, order preserved."""
    xyz = cloud.xyz
    keep = np.all((xyz >= box.mins) & (xyz < box.maxs), axis=1)
    labels = cloud.labels[keep] if cloud.labels is not None else None
    return LidarPointCloud(cloud.points[keep], labels, cloud.frame_id)


class ProjectedPoint(NamedTuple):
    u: float
    v: float
    depth: float
    valid: bool


def project_points(xyz: np.ndarray, cam: CameraModel):
    """Vectorized pinhole projection; returns (u, v, depth, valid) arrays."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    q = xyz @ cam.rotation.T + cam.translation
    depth = q[:, 2]
    safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
    u = cam.fx * q[:, 0] / safe + cam.cx
    v = cam.fy * q[:, 1] / safe + cam.cy
    valid = (depth > MIN_VALID_DEPTH) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, depth, valid


def project_point(p, cam: CameraModel) -> ProjectedPoint:
    """Project one LiDAR-frame point; valid requires depth > 0.1 m and in-bounds pixels."""
    u, v, depth, valid = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    return ProjectedPoint(float(u[0]), float(v[0]), float(depth[0]), bool(valid[0]))


def _bilinear_weights(u, v, w: int, h: int):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.size and (u.min() < 0 or u.max() > w - 1 or v.min() < 0 or v.max() > h - 1):
        raise ValueError(
            f"bilinear sample outside [0, {w - 1}] x [0, {h - 1}]: "
            f"u in [{u.min():.3f}, {u.max():.3f}], v in [{v.min():.3f}, {v.max():.3f}]"
        )
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du, dv = u - u0, v - v0
    return u0, v0, u1, v1, (1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv


def bilinear_sample(feat, u, v):
    """Bilinearly interpolate a (C, H, W) map at continuous pixel coordinates.

    Scalar (u, v) yields a C-vector; 1-D arrays yield (M, C).  Accepts a plain
    numpy array or a DiffArray (in which case the result participates in the
    gradient graph).
    """
    if isinstance(feat, DiffArray):
        scalar = np.isscalar(u) or np.ndim(u) == 0
        uu = np.atleast_1d(np.asarray(u, dtype=np.float64))
        vv = np.atleast_1d(np.asarray(v, dtype=np.float64))
        out = nn.bilinear_gather(feat, uu, vv)
        return out[0] if scalar else out
    feat = np.asarray(feat)
    if feat.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {feat.shape}")
    scalar = np.isscalar(u) or np.ndim(u) == 0
    uu = np.atleast_1d(np.asarray(u, dtype=np.float64))
    vv = np.atleast_1d(np.asarray(v, dtype=np.float64))
    _, h, w = feat.shape
    u0, v0, u1, v1, w00, w01, w10, w11 = _bilinear_weights(uu, vv, w, h)
    out = (
        w00[:, None] * feat[:, v0, u0].T
        + w01[:, None] * feat[:, v0, u1].T
        + w10[:, None] * feat[:, v1, u0].T
        + w11[:, None] * feat[:, v1, u1].T
    )
    return out[0] if scalar else out


def normalize_image(img: np.ndarray, cfg: ImageNormConfig) -> np.ndarray:
    """Per-channel (img - mean) / std."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be H×W×3, got {img.shape}")
    return (img - cfg.mean) / cfg.std


def gather_point_camera_features(
    cloud: LidarPointCloud,
    rig: MultiCamRig,
    feats: Sequence,
    pixel_affines: Sequence[np.ndarray] | None = None,
    xyz: np.ndarray | None = None,
):
    """Per-point camera features from the first camera (in rig order) that sees each point.

    ``feats`` holds one (C, Hf, Wf) map per camera, typically a downsampled
    pyramid level of that camera's image; projected pixel coordinates are
    rescaled so image corners map to feature-map corners.  ``pixel_affines``
    optionally applies a per-camera 2×3 affine to the projected pixels first
    (used when the images were geometrically augmented).  ``xyz`` overrides
    the projected coordinates (used when the point features come from a
    transformed copy of the cloud but the images saw the original geometry).

    Returns ``(features, mask)`` where invisible points have zero features and
    ``mask=False``.  ``features`` is a DiffArray when the maps are DiffArrays.
    """
    if len(feats) != len(rig.cameras):
        raise ValueError("one feature map per camera required")
    coords = cloud.xyz if xyz is None else np.asarray(xyz, dtype=np.float64)
    if coords.shape != (len(cloud), 3):
        raise ValueError(f"projection coords must be ({len(cloud)}, 3), got {coords.shape}")
    n = len(cloud)
    diff_mode = len(feats) > 0 and isinstance(feats[0], DiffArray)
    c_dim = feats[0].shape[0]

    chosen = np.full(n, -1, dtype=np.int64)
    sample_u = np.zeros(n)
    sample_v = np.zeros(n)
    for i, cam in enumerate(rig.cameras):
        u, v, _, valid = project_points(coords, cam)
        img_h, img_w = rig.images[i].shape[:2]
        if pixel_affines is not None:
            a = np.asarray(pixel_affines[i], dtype=np.float64).reshape(2, 3)
            uv = np.stack([u, v, np.ones(n)], axis=1) @ a.T
            u, v = uv[:, 0], uv[:, 1]
            valid &= (u >= 0) & (u <= img_w - 1) & (v >= 0) & (v <= img_h - 1)
        take = valid & (chosen < 0)
        if not np.any(take):
            continue
        _, fh, fw = feats[i].shape
        su = 1.0 if img_w == 1 else (fw - 1) / (img_w - 1)
        sv = 1.0 if img_h == 1 else (fh - 1) / (img_h - 1)
        chosen[take] = i
        sample_u[take] = np.clip(u[take] * su, 0.0, fw - 1)
        sample_v[take] = np.clip(v[take] * sv, 0.0, fh - 1)

    mask = chosen >= 0
    if diff_mode:
        parts = []
        for i in range(len(rig.cameras)):
            sel = np.flatnonzero(chosen == i)
            if sel.size == 0:
                continue
            rows = nn.bilinear_gather(feats[i], sample_u[sel], sample_v[sel])
            parts.append(nn.scatter_rows(sel, rows, n))
        if not parts:
            return nn.constant(np.zeros((n, c_dim))), mask
        out = parts[0]
        for p in parts[1:]:
            out = nn.add(out, p)
        return out, mask

    out = np.zeros((n, c_dim))
    for i in range(len(rig.cameras)):
        sel = chosen == i
        if not np.any(sel):
            continue
        out[sel] = bilinear_sample(np.asarray(feats[i]), sample_u[sel], sample_v[sel])
    return out, mask


# ---------------------------------------------------------------------------
# point-cloud binary file format
# ---------------------------------------------------------------------------


def save_point_cloud(path, cloud: LidarPointCloud) -> None:
    """Write the little-endian binary format (magic, version, N, records, labels)."""
    n = len(cloud)
    has_labels = cloud.labels is not None
    if has_labels and cloud.labels.size and cloud.labels.max() > 0xFFFF:
        raise ValueError("labels exceed u16 range")
    with open(path, "wb") as f:
        f.write(POINT_CLOUD_MAGIC)
        f.write(struct.pack("<IIB", POINT_CLOUD_VERSION, n, 1 if has_labels else 0))
        f.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
        if has_labels:
            f.write(np.ascontiguousarray(cloud.labels, dtype="<u2").tobytes())


def load_point_cloud(path) -> LidarPointCloud:
    raw = Path(path).read_bytes()
    if raw[:8] != POINT_CLOUD_MAGIC:
        raise ValueError(f"{path}: not a point cloud file (bad magic)")
    version, n, has_labels = struct.unpack("<IIB", raw[8:17])
    if version != POINT_CLOUD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 17
    nbytes = n * 5 * 4
    points = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4").reshape(n, 5)
    offset += nbytes
    labels = None
    if has_labels:
        labels = np.frombuffer(raw[offset : offset + 2 * n], dtype="<u2").astype(np.int64)
        offset += 2 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in point cloud file")
    return LidarPointCloud(points.astype(np.float64), labels, Path(path).stem)
