"""Scene persistence: one directory per scene plus a dataset manifest.

Layout::

    <root>/manifest.json          scene list, class names, generator specs
    <root>/scene-0000/cloud.bin   point-cloud binary (magic "VFS3PC")
    <root>/scene-0000/cameras.npz images, label/depth maps, camera parameters
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import geom
from .scene import CLASS_NAMES, Scene, SceneSpec


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def save_scene(sc: Scene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    geom.save_point_cloud(directory / "cloud.bin", sc.cloud)
    arrays: dict[str, np.ndarray] = {"camera_names": np.array([c.name for c in sc.rig.cameras])}
    for cam, img in zip(sc.rig.cameras, sc.rig.images):
        arrays[f"{cam.name}:image"] = img
        arrays[f"{cam.name}:labels"] = sc.pixel_labels[cam.name]
        arrays[f"{cam.name}:depth"] = sc.pixel_depth[cam.name]
        arrays[f"{cam.name}:intrinsics"] = np.array(
            [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]
        )
        arrays[f"{cam.name}:rotation"] = cam.rotation
        arrays[f"{cam.name}:translation"] = cam.translation
    np.savez(directory / "cameras.npz", **arrays)


def load_scene(directory, spec: SceneSpec) -> Scene:
    directory = Path(directory)
    cloud = geom.load_point_cloud(directory / "cloud.bin")
    # The binary format has no frame id; rebuild it from the spec.
    cloud = geom.LidarPointCloud(cloud.points, cloud.labels, f"scene-{spec.seed:05d}")
    with np.load(directory / "cameras.npz") as data:
        names = [str(n) for n in data["camera_names"]]
        cameras, images = [], []
        pixel_labels, pixel_depth = {}, {}
        for name in names:
            fx, fy, cx, cy, w, h = data[f"{name}:intrinsics"]
            cameras.append(
                geom.CameraModel(
                    name=name,
                    fx=float(fx),
                    fy=float(fy),
                    cx=float(cx),
                    cy=float(cy),
                    rotation=data[f"{name}:rotation"],
                    translation=data[f"{name}:translation"],
                    width=int(w),
                    height=int(h),
                )
            )
            images.append(data[f"{name}:image"])
            pixel_labels[name] = data[f"{name}:labels"]
            pixel_depth[name] = data[f"{name}:depth"]
    rig = geom.MultiCamRig(tuple(cameras), tuple(images))
    return Scene(spec, cloud, rig, pixel_labels, pixel_depth)


def save_dataset(scenes, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        name = f"scene-{i:04d}"
        save_scene(sc, root / name)
        entries.append({"dir": name, "spec": asdict(sc.spec)})
    manifest = {"class_names": list(CLASS_NAMES), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        spec = SceneSpec(**{k: _tupleize(v) for k, v in entry["spec"].items()})
        scenes.append(load_scene(root / entry["dir"], spec))
    if not scenes:
        raise ValueError(f"{root}: dataset is empty")
    return scenes
