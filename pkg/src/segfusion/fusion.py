"""Multi-modal fusion: geometric feature fusion, per-class semantic pooling,
cross-attention refinement, and the assembled segmentation model.

The flow per scene: the LiDAR decoder yields an N×64 point feature, the image
neck an N×32 per-point camera feature (zero where no camera sees the point).
GFFM concatenates the two (plus the visibility mask) into a fused N×128
"geometric" feature.  Each modality's auxiliary head produces coarse logits,
which SFAM turns into one embedding per class by probability-weighted pooling.
SFFM then lets every point attend over the 2K class embeddings and refines the
result, and a linear head emits per-point logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbones import (
    ImageEncoder,
    ImageEncoderConfig,
    ImageNeck,
    ImageNeckConfig,
    LidarDecoder,
    LidarEncoder,
    LidarEncoderConfig,
)
from .geom import (
    ImageNormConfig,
    LidarPointCloud,
    MultiCamRig,
    gather_point_camera_features,
    normalize_image,
)
from .nn import DiffArray, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .nn import autodiff as ad

PRESENCE_MASS = 1e-6


@dataclass
class FusedPointFeatures:
    geo: DiffArray          # N x D_f
    mask: np.ndarray        # per-point camera visibility


@dataclass
class SemanticEmbeddings:
    embed: DiffArray        # K x D_f, projected
    pooled: DiffArray       # K x D, probability-weighted class pooling (pre-projection)
    presence: np.ndarray    # per-class: enough probability mass to be meaningful


@dataclass
class HeadConfig:
    num_classes: int
    hidden: int = 0
    aux_lidar: bool = True
    aux_camera: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least two classes, got {self.num_classes}")
        if self.hidden < 0:
            raise ValueError("hidden width must be non-negative")


class GFFM(Module):
    """Concat LiDAR and (masked) camera features, then a residual two-layer MLP."""

    def __init__(self, d_lidar: int, d_cam: int, d_fused: int, rng: np.random.Generator):
        self.lin_in = Linear(d_lidar + d_cam + 1, d_fused, rng)
        self.fc1 = Linear(d_fused, d_fused, rng)
        self.fc2 = Linear(d_fused, d_fused, rng)

    def __call__(self, lidar_feats, cam_feats, mask: np.ndarray) -> FusedPointFeatures:
        n = lidar_feats.shape[0]
        if cam_feats.shape[0] != n or mask.shape != (n,):
            raise ValueError(
                f"point counts differ: lidar {lidar_feats.shape}, camera {cam_feats.shape}, "
                f"mask {mask.shape}"
            )
        m = ad.constant(mask.astype(np.float64)[:, None])
        x = ad.concat([lidar_feats, ad.mul(cam_feats, m), m], axis=-1)
        base = self.lin_in(x)
        geo = ad.add(base, self.fc2(ad.gelu(self.fc1(base))))
        return FusedPointFeatures(geo=geo, mask=mask)


class SFAM(Module):
    """One embedding per class: points pooled by their coarse class probability.

    Weight of point i for class k is p_ik normalized over points, so hard
    one-hot probabilities reduce to the plain mean of each class's points.
    Classes whose total mass falls below ``PRESENCE_MASS`` get a learned null
    embedding and ``presence=False``.
    """

    def __init__(self, d_in: int, d_fused: int, rng: np.random.Generator):
        self.null = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=d_in))
        self.proj = Linear(d_in, d_fused, rng)

    def __call__(self, feats, logits, point_mask: np.ndarray | None = None) -> SemanticEmbeddings:
        n = feats.shape[0]
        if n == 0:
            raise ValueError("cannot aggregate an empty point set")
        if logits.shape[0] != n:
            raise ValueError(f"feature/logit counts differ: {feats.shape} vs {logits.shape}")
        p = ad.softmax(logits, axis=-1)
        if point_mask is not None:
            p = ad.mul(p, ad.constant(point_mask.astype(np.float64)[:, None]))
        mass = ad.sum_(p, axis=0)
        presence = mass.data >= PRESENCE_MASS
        weights = ad.div(p, ad.add(mass, 1e-30))
        pooled = ad.matmul(ad.transpose(weights, (1, 0)), feats)
        keep = ad.constant(presence.astype(np.float64)[:, None])
        filled = ad.add(ad.mul(pooled, keep), ad.mul(self.null.array, ad.sub(1.0, keep)))
        return SemanticEmbeddings(embed=self.proj(filled), pooled=pooled, presence=presence)


class SFFM(Module):
    """Points attend over both modalities' class embeddings, then refine.

    Post-attention: residual add and layer norm, then (toggleable) a
    feedforward block with its own residual and norm.
    """

    def __init__(self, d_fused: int, heads: int, rng: np.random.Generator, use_ffn: bool = True):
        self.attn = MultiHeadAttention(d_fused, heads, rng)
        self.ln1 = LayerNorm(d_fused)
        self.use_ffn = use_ffn
        if use_ffn:
            self.ffn = FeedForward(d_fused, rng)
            self.ln2 = LayerNorm(d_fused)

    def __call__(self, fused: FusedPointFeatures, sem_lidar: SemanticEmbeddings,
                 sem_cam: SemanticEmbeddings) -> DiffArray:
        key_mask = np.concatenate([sem_lidar.presence, sem_cam.presence])
        if not key_mask.any():
            raise ValueError("every semantic embedding is absent; nothing to attend to")
        kv = ad.concat([sem_lidar.embed, sem_cam.embed], axis=0)
        h = self.ln1(ad.add(fused.geo, self.attn(fused.geo, kv, kv, key_mask=key_mask)))
        if self.use_ffn:
            h = self.ln2(ad.add(h, self.ffn(h)))
        return h


class SegHead(Module):
    """Linear classifier, optionally with one hidden gelu layer."""

    def __init__(self, d_in: int, num_classes: int, hidden: int, rng: np.random.Generator):
        if hidden > 0:
            self.fc1 = Linear(d_in, hidden, rng)
            self.fc2 = Linear(hidden, num_classes, rng)
        else:
            self.fc1 = None
            self.fc2 = Linear(d_in, num_classes, rng)

    def __call__(self, x) -> DiffArray:
        if self.fc1 is not None:
            x = ad.gelu(self.fc1(x))
        return self.fc2(x)


def predict_logits(features, head: SegHead) -> DiffArray:
    return head(features)


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------


@dataclass
class FusionConfig:
    head: HeadConfig
    d_fused: int = 128
    sffm_heads: int = 4
    sffm_ffn: bool = True
    main_weight: float = 1.0
    aux_weight_lidar: float = 0.5
    aux_weight_camera: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_fused % self.sffm_heads:
            raise ValueError(f"d_fused {self.d_fused} not divisible by {self.sffm_heads} heads")


@dataclass
class ModelOutputs:
    logits: DiffArray       # N x K, main head
    aux_lidar: DiffArray    # N x K, LiDAR-only coarse head
    aux_camera: DiffArray   # N x K, camera-only coarse head
    mask: np.ndarray        # camera visibility per point
    fused: DiffArray        # N x D_f refined features
    lidar_feats: DiffArray  # N x 64 decoder output
    cam_feats: DiffArray    # N x 32 gathered camera features


class FusionSegModel(Module):
    """The full pipeline from a sampled point cloud plus camera rig to logits."""

    def __init__(self, cfg: FusionConfig,
                 image_cfg: ImageEncoderConfig | None = None,
                 neck_cfg: ImageNeckConfig | None = None,
                 lidar_cfg: LidarEncoderConfig | None = None,
                 norm: ImageNormConfig | None = None):
        self.cfg = cfg
        image_cfg = image_cfg or ImageEncoderConfig(seed=cfg.seed)
        neck_cfg = neck_cfg or ImageNeckConfig(seed=cfg.seed)
        lidar_cfg = lidar_cfg or LidarEncoderConfig(seed=cfg.seed)
        self.norm = norm or ImageNormConfig()
        self.image_enc = ImageEncoder(image_cfg)
        self.image_neck = ImageNeck(image_cfg, neck_cfg)
        self.lidar_enc = LidarEncoder(lidar_cfg)
        self.lidar_dec = LidarDecoder(lidar_cfg)

        d_lidar = lidar_cfg.dec_channels[0]
        d_cam = neck_cfg.out_channels[0]
        k = cfg.head.num_classes
        rng = np.random.default_rng(cfg.seed + 5)
        self.gffm = GFFM(d_lidar, d_cam, cfg.d_fused, rng)
        self.sfam_lidar = SFAM(d_lidar, cfg.d_fused, rng)
        self.sfam_camera = SFAM(d_cam, cfg.d_fused, rng)
        self.sffm = SFFM(cfg.d_fused, cfg.sffm_heads, rng, use_ffn=cfg.sffm_ffn)
        self.head_main = SegHead(cfg.d_fused, k, cfg.head.hidden, rng)
        self.head_lidar = SegHead(d_lidar, k, 0, rng)
        self.head_camera = SegHead(d_cam, k, 0, rng)
        self.assign_names()

    def camera_feature_maps(self, rig: MultiCamRig) -> list:
        """Per-camera fused neck maps at 1/4 of the (possibly augmented) image."""
        maps = []
        for img in rig.images:
            pyramid = self.image_enc(normalize_image(img, self.norm))
            maps.append(self.image_neck(pyramid))
        return maps

    def forward(self, cloud: LidarPointCloud, rig: MultiCamRig,
                pixel_affines=None, cam_xyz: np.ndarray | None = None) -> ModelOutputs:
        """Run the pipeline.

        ``cam_xyz`` supplies the coordinates used for camera projection when
        the cloud's own coordinates have been transformed (test-time
        augmentation): the LiDAR branch sees the transformed geometry while
        the cameras are still queried where the points physically were.
        """
        maps = self.camera_feature_maps(rig)
        cam_feats, mask = gather_point_camera_features(
            cloud, rig, maps, pixel_affines=pixel_affines, xyz=cam_xyz
        )
        enc_out = self.lidar_enc(ad.constant(cloud.points), cloud.xyz)
        lidar_feats = self.lidar_dec(enc_out)

        aux_lidar = self.head_lidar(lidar_feats)
        aux_camera = self.head_camera(cam_feats)
        sem_lidar = self.sfam_lidar(lidar_feats, aux_lidar)
        sem_camera = self.sfam_camera(cam_feats, aux_camera, point_mask=mask)
        fused = self.sffm(self.gffm(lidar_feats, cam_feats, mask), sem_lidar, sem_camera)
        logits = self.head_main(fused)
        return ModelOutputs(logits, aux_lidar, aux_camera, mask, fused, lidar_feats, cam_feats)

    __call__ = forward


def total_loss(out: ModelOutputs, labels: np.ndarray, cfg: FusionConfig,
               ignore_index: int | None = None) -> DiffArray:
    """Main segmentation loss plus weighted auxiliary losses per modality."""
    loss = ad.mul(nn.segmentation_loss(out.logits, labels, ignore_index=ignore_index),
                  cfg.main_weight)
    if cfg.head.aux_lidar and cfg.aux_weight_lidar:
        aux = nn.segmentation_loss(out.aux_lidar, labels, ignore_index=ignore_index)
        loss = ad.add(loss, ad.mul(aux, cfg.aux_weight_lidar))
    if cfg.head.aux_camera and cfg.aux_weight_camera:
        aux = nn.segmentation_loss(out.aux_camera, labels, ignore_index=ignore_index)
        loss = ad.add(loss, ad.mul(aux, cfg.aux_weight_camera))
    return loss
