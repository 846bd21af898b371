"""Staged training: each backbone alone, then frozen while the fusion layers learn.

A run is three stages.  ``lidar`` trains the point branch and its auxiliary
head; ``image`` trains the camera branch and its head (supervised on points
visible in at least one camera); ``fusion`` restores both trained branches
from their checkpoints, freezes them, and trains the fusion modules and main
head.  Each stage writes per-epoch checkpoints plus a ``latest.json`` manifest
and appends train metrics to ``metrics.csv``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import augment, nn
from ..fusion import FusionSegModel, total_loss
from ..geom import LidarPointCloud, MultiCamRig, crop_to_range, gather_point_camera_features
from ..nn import autodiff as ad
from . import config as run_config
from .metrics import Metrics, append_metrics_csv, confusion_matrix, metrics_from_confusion
from .scene import CLASS_NAMES, NUM_CLASSES, Scene

STAGES = ("lidar", "image", "fusion")
BACKBONE_PREFIXES = ("lidar_enc.", "lidar_dec.", "image_enc.", "image_neck.")

# checkpoint contents restored per prerequisite stage when fusion starts
_RESTORE_PREFIXES = {
    "lidar": ("lidar_enc.", "lidar_dec.", "head_lidar."),
    "image": ("image_enc.", "image_neck.", "head_camera."),
}

_STAGE_TAG = {"lidar": 11, "image": 12, "fusion": 13}
_EVAL_TAG = 14
IGNORE_LABEL = -1


@dataclass
class TrainStageConfig:
    stage: str
    epochs: int
    batch_size: int = 2
    frozen_prefixes: tuple = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.stage == "fusion":
            missing = [p for p in BACKBONE_PREFIXES if p not in self.frozen_prefixes]
            if missing:
                raise ValueError(f"fusion stage must freeze both backbones; missing {missing}")


def stage_config(cfg: run_config.RunConfig, stage: str) -> TrainStageConfig:
    epochs = {"lidar": cfg.lidar_epochs, "image": cfg.image_epochs, "fusion": cfg.fusion_epochs}
    frozen = BACKBONE_PREFIXES if stage == "fusion" else ()
    if stage not in epochs:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    return TrainStageConfig(stage, epochs[stage], cfg.batch_size, frozen)


def build_model(cfg: run_config.RunConfig, num_classes: int = NUM_CLASSES) -> FusionSegModel:
    fusion_cfg, image_cfg, neck_cfg, lidar_cfg = run_config.model_configs(cfg, num_classes)
    return FusionSegModel(
        fusion_cfg, image_cfg, neck_cfg, lidar_cfg, norm=run_config.norm_config(cfg)
    )


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


@dataclass
class FreezeReport:
    """Names and content digests of the parameters a freeze call locked."""

    names: tuple
    digests: dict


def param_digests(params, prefixes=None) -> dict:
    out = {}
    for p in params:
        if prefixes is None or any(p.name.startswith(pre) for pre in prefixes):
            out[p.name] = hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
    return out


def freeze_params(params, prefixes) -> FreezeReport:
    """Freeze every parameter whose name starts with one of ``prefixes``.

    A prefix that matches nothing is almost certainly a typo and raises.
    An empty prefix list freezes nothing.
    """
    params = list(params)
    matched = []
    for prefix in prefixes:
        hits = [p for p in params if p.name.startswith(prefix)]
        if not hits:
            raise ValueError(f"freeze prefix {prefix!r} matches no parameter")
        matched.extend(hits)
    seen = set()
    names = []
    for p in matched:
        if p.name not in seen:
            seen.add(p.name)
            p.freeze()
            names.append(p.name)
    return FreezeReport(tuple(names), param_digests([p for p in params if p.name in seen]))


# ---------------------------------------------------------------------------
# scene preparation (augment -> crop -> grid sample)
# ---------------------------------------------------------------------------


@dataclass
class PreparedScene:
    """A scene reduced to model inputs, remembering how to undo the sampling."""

    cloud: LidarPointCloud        # grid-sampled, coordinates possibly augmented
    labels: np.ndarray            # per sampled point
    cam_xyz: np.ndarray           # physical coordinates of the sampled points
    rig: MultiCamRig              # images, possibly augmented
    affines: list | None          # per-camera pixel affines when images are augmented
    inverse: np.ndarray           # original point -> sampled row
    full_labels: np.ndarray       # labels of every pre-sampling point


def prepare_scene(
    sc: Scene, cfg: run_config.RunConfig, *, augmented: bool, rng: np.random.Generator
) -> PreparedScene:
    base = crop_to_range(sc.cloud, run_config.range_box(cfg))
    if len(base) == 0:
        raise ValueError(f"scene {sc.cloud.frame_id}: no points inside the range box")
    geo = base
    if augmented and cfg.augment:
        geo, _ = augment.augment_lidar(base, run_config.lidar_aug_config(cfg), rng)
    sampled, kept, inverse = augment.grid_sample(geo, cfg.grid_cell)

    rig = sc.rig
    affines = None
    if augmented and cfg.image_augment:
        img_cfg = run_config.image_aug_config(cfg)
        images, affines = [], []
        for img in sc.rig.images:
            tf = augment.sample_image_transform(img.shape[:2], img_cfg, rng)
            images.append(augment.apply_image_transform(img, tf))
            affines.append(tf.affine)
        rig = MultiCamRig(sc.rig.cameras, tuple(images))

    return PreparedScene(
        cloud=sampled,
        labels=sampled.labels,
        cam_xyz=base.xyz[kept],
        rig=rig,
        affines=affines,
        inverse=inverse,
        full_labels=base.labels,
    )


# ---------------------------------------------------------------------------
# per-stage forward passes
# ---------------------------------------------------------------------------


def _lidar_logits(model: FusionSegModel, prep: PreparedScene):
    enc = model.lidar_enc(ad.constant(prep.cloud.points), prep.cloud.xyz)
    return model.head_lidar(model.lidar_dec(enc))


def _camera_logits(model: FusionSegModel, prep: PreparedScene):
    maps = model.camera_feature_maps(prep.rig)
    feats, mask = gather_point_camera_features(
        prep.cloud, prep.rig, maps, pixel_affines=prep.affines, xyz=prep.cam_xyz
    )
    return model.head_camera(feats), mask


def stage_loss(model: FusionSegModel, prep: PreparedScene, stage: str):
    """The loss a stage optimizes; only that stage's branch joins the graph."""
    if stage == "lidar":
        return nn.segmentation_loss(_lidar_logits(model, prep), prep.labels)
    if stage == "image":
        logits, mask = _camera_logits(model, prep)
        if not mask.any():
            raise ValueError("no point is visible in any camera; cannot train the image stage")
        labels = np.where(mask, prep.labels, IGNORE_LABEL)
        return nn.segmentation_loss(logits, labels, ignore_index=IGNORE_LABEL)
    out = model(prep.cloud, prep.rig, pixel_affines=prep.affines, cam_xyz=prep.cam_xyz)
    return total_loss(out, prep.labels, model.cfg)


def stage_logits(model: FusionSegModel, prep: PreparedScene, stage: str) -> np.ndarray:
    """Prediction logits for metrics, from the head the stage trains."""
    if stage == "lidar":
        return _lidar_logits(model, prep).data
    if stage == "image":
        return _camera_logits(model, prep)[0].data
    return model(prep.cloud, prep.rig, pixel_affines=prep.affines, cam_xyz=prep.cam_xyz).logits.data


# ---------------------------------------------------------------------------
# checkpoints and manifest
# ---------------------------------------------------------------------------


def _manifest_path(out_dir) -> Path:
    return Path(out_dir) / "latest.json"


def read_manifest(out_dir) -> dict:
    path = _manifest_path(out_dir)
    return json.loads(path.read_text()) if path.exists() else {}


def _write_manifest(out_dir, manifest: dict) -> None:
    _manifest_path(out_dir).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def restore_prefixes(params, ckpt_path, prefixes) -> None:
    """Copy checkpointed values into every parameter under the given prefixes."""
    _, arrays, _ = nn.load_checkpoint(ckpt_path)
    for p in params:
        if any(p.name.startswith(pre) for pre in prefixes):
            if p.name not in arrays:
                raise ValueError(f"checkpoint {ckpt_path} lacks parameter {p.name!r}")
            p.data = arrays[p.name]


def _require_backbones(model: FusionSegModel, out_dir) -> None:
    manifest = read_manifest(out_dir)
    params = model.parameters()
    for prereq in ("lidar", "image"):
        entry = manifest.get(prereq)
        if entry is None:
            raise ValueError(
                f"fusion stage requires a trained {prereq} checkpoint; "
                f"run `train --stage {prereq}` first"
            )
        restore_prefixes(params, Path(out_dir) / entry["checkpoint"], _RESTORE_PREFIXES[prereq])


# ---------------------------------------------------------------------------
# the stage driver
# ---------------------------------------------------------------------------


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def run_stage(
    model: FusionSegModel,
    dataset,
    stage_cfg: TrainStageConfig,
    cfg: run_config.RunConfig,
    out_dir,
) -> list[dict]:
    """Train one stage; returns the per-epoch history of loss and train metrics."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = stage_cfg.stage
    if stage == "fusion":
        _require_backbones(model, out_dir)

    params = model.parameters()
    report = freeze_params(params, stage_cfg.frozen_prefixes)
    steps_per_epoch = math.ceil(len(dataset) / stage_cfg.batch_size)
    schedule = run_config.schedule_config(cfg, stage_cfg.epochs * steps_per_epoch)
    opt = nn.AdamW(params, weight_decay=cfg.weight_decay)
    tag = _STAGE_TAG[stage]

    history = []
    step = 0
    try:
        for epoch in range(1, stage_cfg.epochs + 1):
            order = augment.rng_from(cfg.seed, tag, epoch).permutation(len(dataset))
            loss_sum = 0.0
            for batch in _batches(order, stage_cfg.batch_size):
                losses = []
                for idx in batch:
                    rng = augment.rng_from(cfg.seed, tag, epoch, int(idx))
                    prep = prepare_scene(dataset[idx], cfg, augmented=True, rng=rng)
                    losses.append(stage_loss(model, prep, stage))
                loss = losses[0]
                for extra in losses[1:]:
                    loss = ad.add(loss, extra)
                loss = ad.mul(loss, 1.0 / len(losses))
                opt.zero_grad()
                loss.backward()
                lrs = {g: nn.cosine_lr(step, schedule, g) for g in schedule.base_lr}
                opt.step(lrs)
                step += 1
                loss_sum += float(loss.data) * len(batch)

            m = _train_metrics(model, dataset, cfg, stage)
            mean_loss = loss_sum / len(dataset)
            append_metrics_csv(out_dir / "metrics.csv", epoch, "train", mean_loss, m, CLASS_NAMES)
            ckpt_name = f"stage-{stage}-epoch-{epoch}.ckpt"
            nn.save_checkpoint(out_dir / ckpt_name, params, step=step)
            manifest = read_manifest(out_dir)
            manifest[stage] = {"checkpoint": ckpt_name, "epoch": epoch, "steps": step}
            _write_manifest(out_dir, manifest)
            history.append(
                {"epoch": epoch, "loss": mean_loss, "miou": m.miou, "accuracy": m.accuracy}
            )
    finally:
        for p in params:
            if p.name in report.digests:
                p.unfreeze()
    return history


def _train_metrics(model: FusionSegModel, dataset, cfg, stage: str) -> Metrics:
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for sc in dataset:
        prep = prepare_scene(sc, cfg, augmented=False, rng=augment.rng_from(cfg.seed, _EVAL_TAG))
        preds = stage_logits(model, prep, stage).argmax(axis=1)
        conf += confusion_matrix(prep.full_labels, preds[prep.inverse], NUM_CLASSES)
    return metrics_from_confusion(conf)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_HEADS = ("main", "aux_lidar", "aux_camera")


def evaluate_miou(
    model: FusionSegModel,
    dataset,
    cfg: run_config.RunConfig,
    *,
    tta: augment.TtaConfig | None = None,
    head: str = "main",
) -> Metrics:
    """Confusion over every pre-sampling point, predictions broadcast via inverse.

    With TTA, per-variant logits are averaged before the argmax; variants
    transform coordinates only, so rows stay aligned across the stack.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    if head not in _HEADS:
        raise ValueError(f"unknown head {head!r}, expected one of {_HEADS}")
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for i, sc in enumerate(dataset):
        prep = prepare_scene(sc, cfg, augmented=False, rng=augment.rng_from(cfg.seed, _EVAL_TAG))
        if tta is None:
            logits = _head_logits(model, prep, prep.cloud, head)
        else:
            rng = augment.rng_from(cfg.seed, _EVAL_TAG, i)
            stack = [
                _head_logits(model, prep, cloud_v, head)
                for cloud_v, _ in augment.make_tta_variants(prep.cloud, tta, rng)
            ]
            logits = augment.aggregate_tta_logits(np.stack(stack))
        preds = logits.argmax(axis=1)
        conf += confusion_matrix(prep.full_labels, preds[prep.inverse], NUM_CLASSES)
    return metrics_from_confusion(conf)


def _head_logits(model, prep: PreparedScene, cloud, head: str) -> np.ndarray:
    out = model(cloud, prep.rig, pixel_affines=prep.affines, cam_xyz=prep.cam_xyz)
    return {"main": out.logits, "aux_lidar": out.aux_lidar, "aux_camera": out.aux_camera}[
        head
    ].data
