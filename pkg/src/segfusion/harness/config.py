"""One flat run configuration: every training knob, defaulting to the full recipe.

The defaults record the real pipeline's hyperparameters (learning rates
8e-4/8e-5, weight decay 5e-2, cosine schedule, batch size 2, the augmentation
ranges, the four serialization curves and the full channel widths).  Desk-scale
runs override them through a ``key = value`` config file; section headers are
decorative and unknown keys are rejected so typos surface immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .. import geom
from ..augment import ImageAugConfig, LidarAugConfig
from ..backbones import ImageEncoderConfig, ImageNeckConfig, LidarEncoderConfig
from ..fusion import FusionConfig, HeadConfig
from ..nn import ScheduleConfig


@dataclass
class RunConfig:
    # data
    seed: int = 0
    num_scenes: int = 5
    scene_points: int = 512
    scene_width: int = 64
    scene_height: int = 48
    # preprocessing
    grid_cell: float = 0.1
    range_xyz: tuple = (-75.2, -75.2, -4.0, 75.2, 75.2, 2.0)
    image_mean: tuple = (0.40789654, 0.44719302, 0.47026115)
    image_std: tuple = (0.28863828, 0.27408164, 0.27809835)
    # lidar augmentation
    augment: bool = True
    image_augment: bool = True
    lidar_rot_min: float = -math.pi / 4
    lidar_rot_max: float = math.pi / 4
    lidar_trans_sigma: float = 0.5
    lidar_scale_min: float = 0.95
    lidar_scale_max: float = 1.05
    # image augmentation
    image_scale_min: float = 1.0
    image_scale_max: float = 1.5
    image_rot_min_deg: float = -1.0
    image_rot_max_deg: float = 1.0
    crop_height: int = 640
    crop_width: int = 960
    jitter_brightness: float = 0.3
    jitter_contrast: float = 0.3
    jitter_saturation: float = 0.3
    jitter_hue: float = 0.1
    # serialization
    curves: tuple = ("z", "z-trans", "hilbert", "hilbert-trans")
    bits_per_axis: int = 11
    # model
    lidar_enc_channels: tuple = (32, 64, 128, 256, 512)
    lidar_dec_channels: tuple = (64, 64, 128, 256)
    image_enc_channels: tuple = (32, 64, 128, 256, 512)
    image_stem_channels: int = 16
    image_neck_channels: tuple = (32, 64, 128, 256)
    group_size: int = 32
    attn_heads: int = 4
    d_fused: int = 128
    sffm_heads: int = 4
    sffm_ffn: bool = True
    head_hidden: int = 0
    # loss
    main_weight: float = 1.0
    aux_lidar_weight: float = 0.5
    aux_camera_weight: float = 0.5
    # optimization
    main_lr: float = 8e-4
    block_lr: float = 8e-5
    weight_decay: float = 5e-2
    batch_size: int = 2
    lidar_epochs: int = 45
    image_epochs: int = 10
    fusion_epochs: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if min(self.lidar_epochs, self.image_epochs, self.fusion_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if len(self.range_xyz) != 6:
            raise ValueError(f"range_xyz needs 6 numbers, got {self.range_xyz}")


# ---------------------------------------------------------------------------
# key = value parsing
# ---------------------------------------------------------------------------


def _parse_scalar(raw: str, like) -> object:
    if isinstance(like, bool):
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_value(raw: str, default) -> object:
    """Coerce ``raw`` to the type of the field's default value."""
    raw = raw.strip()
    if isinstance(default, tuple):
        like = default[0]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_parse_scalar(item, like) for item in items)
    return _parse_scalar(raw, default)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines over ``base`` (or the defaults)."""
    defaults = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    values = {f.name: getattr(base, f.name) for f in fields(RunConfig)} if base else dict(defaults)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = parse_value(raw, defaults[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base=base)


_SECTIONS = (
    ("data", ("seed", "num_scenes", "scene_points", "scene_width", "scene_height")),
    ("preprocessing", ("grid_cell", "range_xyz", "image_mean", "image_std")),
    (
        "augmentation",
        (
            "augment",
            "image_augment",
            "lidar_rot_min",
            "lidar_rot_max",
            "lidar_trans_sigma",
            "lidar_scale_min",
            "lidar_scale_max",
            "image_scale_min",
            "image_scale_max",
            "image_rot_min_deg",
            "image_rot_max_deg",
            "crop_height",
            "crop_width",
            "jitter_brightness",
            "jitter_contrast",
            "jitter_saturation",
            "jitter_hue",
        ),
    ),
    ("serialization", ("curves", "bits_per_axis")),
    (
        "model",
        (
            "lidar_enc_channels",
            "lidar_dec_channels",
            "image_enc_channels",
            "image_stem_channels",
            "image_neck_channels",
            "group_size",
            "attn_heads",
            "d_fused",
            "sffm_heads",
            "sffm_ffn",
            "head_hidden",
        ),
    ),
    ("loss", ("main_weight", "aux_lidar_weight", "aux_camera_weight")),
    (
        "optimization",
        (
            "main_lr",
            "block_lr",
            "weight_decay",
            "batch_size",
            "lidar_epochs",
            "image_epochs",
            "fusion_epochs",
        ),
    ),
)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Render every field, grouped by section; parses back to an equal config."""
    lines = []
    for section, names in _SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(f"{name} = {_format_value(getattr(cfg, name))}" for name in names)
        lines.append("")
    covered = {name for _, names in _SECTIONS for name in names}
    missing = [f.name for f in fields(RunConfig) if f.name not in covered]
    if missing:
        raise AssertionError(f"config fields missing from dump sections: {missing}")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


# ---------------------------------------------------------------------------
# adapters into the component configs
# ---------------------------------------------------------------------------


def lidar_aug_config(cfg: RunConfig, seed: int = 0) -> LidarAugConfig:
    return LidarAugConfig(
        rot_range=(cfg.lidar_rot_min, cfg.lidar_rot_max),
        trans_sigma=cfg.lidar_trans_sigma,
        scale_range=(cfg.lidar_scale_min, cfg.lidar_scale_max),
        seed=seed,
    )


def image_aug_config(cfg: RunConfig, seed: int = 0) -> ImageAugConfig:
    return ImageAugConfig(
        scale_range=(cfg.image_scale_min, cfg.image_scale_max),
        rot_range_deg=(cfg.image_rot_min_deg, cfg.image_rot_max_deg),
        crop_h=cfg.crop_height,
        crop_w=cfg.crop_width,
        jitter=(cfg.jitter_brightness, cfg.jitter_contrast, cfg.jitter_saturation, cfg.jitter_hue),
        seed=seed,
    )


def range_box(cfg: RunConfig) -> geom.RangeBox:
    x0, y0, z0, x1, y1, z1 = cfg.range_xyz
    return geom.RangeBox(x0, y0, z0, x1, y1, z1)


def norm_config(cfg: RunConfig) -> geom.ImageNormConfig:
    return geom.ImageNormConfig(mean=cfg.image_mean, std=cfg.image_std)


def model_configs(cfg: RunConfig, num_classes: int):
    """The four component configs implied by a run configuration."""
    head = HeadConfig(num_classes=num_classes, hidden=cfg.head_hidden)
    fusion = FusionConfig(
        head=head,
        d_fused=cfg.d_fused,
        sffm_heads=cfg.sffm_heads,
        sffm_ffn=cfg.sffm_ffn,
        main_weight=cfg.main_weight,
        aux_weight_lidar=cfg.aux_lidar_weight,
        aux_weight_camera=cfg.aux_camera_weight,
        seed=cfg.seed,
    )
    image = ImageEncoderConfig(
        stage_channels=cfg.image_enc_channels,
        stem_channels=cfg.image_stem_channels,
        seed=cfg.seed,
    )
    neck = ImageNeckConfig(out_channels=cfg.image_neck_channels, seed=cfg.seed)
    lidar = LidarEncoderConfig(
        enc_channels=cfg.lidar_enc_channels,
        dec_channels=cfg.lidar_dec_channels,
        group_size=cfg.group_size,
        heads=cfg.attn_heads,
        curve_kinds=cfg.curves,
        base_cell=cfg.grid_cell,
        bits_per_axis=cfg.bits_per_axis,
        seed=cfg.seed,
    )
    return fusion, image, neck, lidar


def schedule_config(cfg: RunConfig, total_steps: int) -> ScheduleConfig:
    return ScheduleConfig(
        base_lr={"main": cfg.main_lr, "block": cfg.block_lr},
        min_lr=0.0,
        total_steps=max(total_steps, 1),
    )
