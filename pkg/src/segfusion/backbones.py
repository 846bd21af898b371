"""Dual feature extractors.

Image side: a residual convolution pyramid (stem plus five stride-2 stages)
and a neck that iteratively upsamples deeper levels and adds them residually
into shallower ones, ending in a single map at 1/4 resolution.

LiDAR side: points are ordered along a space-filling curve, chopped into
fixed-size groups, and refined by grouped self-attention; between stages the
cloud is pooled onto a doubling grid.  A decoder walks back up the pooling
maps, concatenating skip features and projecting down to a per-point vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import curves
from . import nn
from .nn import DiffArray, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .nn import autodiff as ad


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


@dataclass
class ImageEncoderConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    stem_channels: int = 16
    blocks_per_stage: int = 1
    seed: int = 0

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage channels must strictly increase: {self.stage_channels}")
        if self.stem_channels < 1 or self.blocks_per_stage < 1:
            raise ValueError("stem channels and blocks per stage must be positive")


@dataclass
class FeaturePyramid:
    """Per-level (C, H, W) maps with their downsampling factors."""

    levels: list
    scales: list[int]

    def __post_init__(self):
        if len(self.levels) != len(self.scales):
            raise ValueError("one scale per level required")
        for s in self.scales:
            if s < 1 or s & (s - 1):
                raise ValueError(f"level scales must be powers of two, got {self.scales}")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3,
                 stride: int = 1, pad: int = 1, group: str = "main", bias: bool = True):
        fan = c_in * k * k
        self.w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(fan), size=(c_out, c_in, k, k)), group)
        self.b = Parameter(np.zeros(c_out), group) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x) -> DiffArray:
        b = self.b.array if self.b is not None else None
        return ad.conv2d(x, self.w.array, b, stride=self.stride, pad=self.pad)


class ResidualBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator, group: str = "main"):
        self.conv1 = Conv2d(c, c, rng, group=group)
        self.conv2 = Conv2d(c, c, rng, group=group)

    def __call__(self, x) -> DiffArray:
        return ad.relu(ad.add(x, self.conv2(ad.relu(self.conv1(x)))))


class ImageEncoder(Module):
    """Stem at full resolution, then one stride-2 stage per configured width."""

    PARAM_GROUP = "block"

    def __init__(self, cfg: ImageEncoderConfig):
        rng = np.random.default_rng(cfg.seed)
        g = self.PARAM_GROUP
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.stem_channels, rng, group=g)
        self.downs = []
        self.stages = []
        c_prev = cfg.stem_channels
        for c in cfg.stage_channels:
            self.downs.append(Conv2d(c_prev, c, rng, stride=2, group=g))
            self.stages.append(
                [ResidualBlock(c, rng, group=g) for _ in range(cfg.blocks_per_stage)]
            )
            c_prev = c

    def __call__(self, img: np.ndarray) -> FeaturePyramid:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected H×W×3 image, got {img.shape}")
        h, w = img.shape[:2]
        least = 2 ** len(self.cfg.stage_channels)
        if h < least or w < least:
            raise ValueError(f"image dims {h}×{w} too small: need at least {least} per side")
        x = ad.relu(self.stem(ad.constant(np.moveaxis(img, 2, 0))))
        levels, scales = [x], [1]
        for i, down in enumerate(self.downs):
            x = ad.relu(down(x))
            for block in self.stages[i]:
                x = block(x)
            levels.append(x)
            scales.append(2 ** (i + 1))
        return FeaturePyramid(levels, scales)


def image_encode(img: np.ndarray, encoder: ImageEncoder) -> FeaturePyramid:
    return encoder(img)


@dataclass
class ImageNeckConfig:
    out_channels: tuple[int, ...] = (32, 64, 128, 256)
    seed: int = 0

    def __post_init__(self):
        if len(self.out_channels) != 4:
            raise ValueError(f"neck expects 4 output levels, got {self.out_channels}")


def _project_map(x: DiffArray, lin: Linear) -> DiffArray:
    """Apply a per-pixel linear map to a (C, H, W) array."""
    c, h, w = x.shape
    flat = ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))
    out = lin(flat)
    return ad.transpose(ad.reshape(out, (h, w, out.shape[-1])), (2, 0, 1))


class ImageNeck(Module):
    """Project levels 1/4..1/32, then upsample-and-add down to 1/4 scale.

    All projections are bias-free, so a zero pyramid stays zero through the
    whole aggregation.
    """

    PARAM_GROUP = "block"

    def __init__(self, enc_cfg: ImageEncoderConfig, cfg: ImageNeckConfig):
        rng = np.random.default_rng(cfg.seed + 1)
        g = self.PARAM_GROUP
        self.cfg = cfg
        in_ch = enc_cfg.stage_channels[1:]  # levels at scales 4, 8, 16, 32
        if len(in_ch) != 4:
            raise ValueError("encoder must provide four levels below 1/2 scale")
        self.laterals = [Linear(ci, co, rng, group=g, bias=False)
                         for ci, co in zip(in_ch, cfg.out_channels)]
        oc = cfg.out_channels
        self.downs = [Linear(oc[i + 1], oc[i], rng, group=g, bias=False) for i in range(3)]

    def __call__(self, pyramid: FeaturePyramid) -> DiffArray:
        if len(pyramid.levels) != 6:
            raise ValueError(f"expected a 6-level pyramid, got {len(pyramid.levels)} levels")
        ys = [_project_map(lvl, lat) for lvl, lat in zip(pyramid.levels[2:], self.laterals)]
        h = ys[-1]
        for i in (2, 1, 0):
            up = ad.upsample_nearest2(h)
            th, tw = ys[i].shape[1], ys[i].shape[2]
            if up.shape[1] != th or up.shape[2] != tw:
                # odd-sized level below: doubling overshoots by one row/column
                up = up[:, :th, :tw]
            h = ad.add(ys[i], _project_map(up, self.downs[i]))
        return h


def image_neck(pyramid: FeaturePyramid, neck: ImageNeck) -> DiffArray:
    return neck(pyramid)


# ---------------------------------------------------------------------------
# LiDAR encoder / decoder
# ---------------------------------------------------------------------------


@dataclass
class LidarEncoderConfig:
    enc_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    dec_channels: tuple[int, ...] = (64, 64, 128, 256)
    group_size: int = 32
    heads: int = 4
    curve_kinds: tuple[str, ...] = ("z", "z-trans", "hilbert", "hilbert-trans")
    base_cell: float = 0.1
    bits_per_axis: int = 11
    in_channels: int = 5
    seed: int = 0

    def __post_init__(self):
        if len(self.enc_channels) != 5:
            raise ValueError(f"expected 5 encoder widths, got {self.enc_channels}")
        if len(self.dec_channels) != 4:
            raise ValueError(f"expected 4 decoder widths, got {self.dec_channels}")
        if self.group_size < 4:
            raise ValueError("attention group size must be at least 4")
        for c in self.enc_channels:
            if c % self.heads:
                raise ValueError(f"channel width {c} not divisible by {self.heads} heads")
        for k in self.curve_kinds:
            if k not in curves.CURVE_KINDS:
                raise ValueError(f"unknown curve kind {k!r}")
        if self.base_cell <= 0:
            raise ValueError("base cell must be positive")


def _pool_cells(xyz: np.ndarray, cell: float):
    """Cell assignment used for pooling: same representative rule as grid_sample."""
    cells = np.floor(xyz / cell).astype(np.int64)
    _, first_idx, inv = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first_idx, kind="stable")
    kept = first_idx[order]
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    return kept, rank[inv]


def _group_indices(order: np.ndarray, group_size: int):
    """Pad serialized chunks into a (G, S) index matrix plus a validity mask."""
    groups = curves.partition_groups(order, group_size)
    g = len(groups)
    idx = np.zeros((g, group_size), dtype=np.int64)
    valid = np.zeros((g, group_size), dtype=bool)
    for i, grp in enumerate(groups):
        idx[i, : len(grp)] = grp
        valid[i, : len(grp)] = True
    return idx, valid


class LidarStage(Module):
    """Serialized grouped attention plus feedforward, both with residuals.

    Attention queries/keys get the point's offset to its group centroid
    concatenated on, a minimal positional signal.
    """

    def __init__(self, c_in: int, c: int, cfg: LidarEncoderConfig, kind: str,
                 cell: float, rng: np.random.Generator):
        self.proj = Linear(c_in, c, rng)
        self.ln1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, cfg.heads, rng, d_q_in=c + 3, d_kv_in=c + 3)
        self.ln2 = LayerNorm(c)
        self.ff = FeedForward(c, rng)
        self.kind = kind
        self.cell = cell
        self.group_size = cfg.group_size
        self.bits = cfg.bits_per_axis

    def __call__(self, feats, xyz: np.ndarray) -> DiffArray:
        n = xyz.shape[0]
        h = self.proj(feats)
        spec = curves.GridSpec(origin=xyz.min(axis=0), cell=self.cell, bits_per_axis=self.bits)
        order = curves.serialize_order(xyz, spec, self.kind)
        idx, valid = _group_indices(order, self.group_size)
        g, s = idx.shape
        flat = idx.reshape(-1)

        centroids = np.array([xyz[row[v]].mean(axis=0) for row, v in zip(idx, valid)])
        offsets = (xyz[flat].reshape(g, s, 3) - centroids[:, None, :]) * valid[..., None]

        x = ad.reshape(nn.gather_rows(h, flat), (g, s, h.shape[1]))
        q_in = ad.concat([self.ln1(x), ad.constant(offsets)], axis=-1)
        att = self.attn(q_in, q_in, q_in, key_mask=valid)
        att_flat = ad.reshape(att, (g * s, h.shape[1]))
        back = nn.gather_rows(att_flat, np.flatnonzero(valid.reshape(-1)))
        h = ad.add(h, nn.scatter_rows(flat[valid.reshape(-1)], back, n))
        return ad.add(h, self.ff(self.ln2(h)))


@dataclass
class LidarEncoderOutput:
    final: DiffArray          # coarsest stage output
    skips: list               # per-stage attention outputs, fine to coarse
    coords: list              # per-stage point coordinates
    pool_maps: list[np.ndarray]  # stage i+1's fine-to-coarse membership map


class LidarEncoder(Module):
    """Five attention stages; stages after the first pool onto a doubled grid."""

    def __init__(self, cfg: LidarEncoderConfig):
        rng = np.random.default_rng(cfg.seed + 2)
        self.cfg = cfg
        self.stages = []
        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.enc_channels):
            kind = cfg.curve_kinds[i % len(cfg.curve_kinds)]
            cell = cfg.base_cell * (2 ** i)
            self.stages.append(LidarStage(c_prev, c, cfg, kind, cell, rng))
            c_prev = c

    def __call__(self, feats, xyz: np.ndarray) -> LidarEncoderOutput:
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] == 0:
            raise ValueError(f"need a non-empty (N, 3) coordinate array, got {xyz.shape}")
        if feats.shape[0] != xyz.shape[0]:
            raise ValueError("feature and coordinate counts differ")
        h = ad.asdiff(feats)
        skips, coords, maps = [], [], []
        for i, stage in enumerate(self.stages):
            if i > 0:
                kept, member = _pool_cells(xyz, self.cfg.base_cell * (2 ** i))
                h = nn.segment_mean(h, member, len(kept))
                xyz = xyz[kept]
                maps.append(member)
            h = stage(h, xyz)
            skips.append(h)
            coords.append(xyz)
        return LidarEncoderOutput(final=h, skips=skips, coords=coords, pool_maps=maps)


def lidar_encode(feats, xyz, encoder: LidarEncoder) -> LidarEncoderOutput:
    return encoder(feats, xyz)


class LidarDecoder(Module):
    """Walk the pooling maps back up, fusing skip features at every stage."""

    def __init__(self, cfg: LidarEncoderConfig):
        rng = np.random.default_rng(cfg.seed + 3)
        self.cfg = cfg
        enc, dec = cfg.enc_channels, cfg.dec_channels
        self.projs = []
        c_up = enc[-1]
        for i in range(3, -1, -1):  # coarse to fine: dec widths 256, 128, 64, 64
            self.projs.append(Linear(c_up + enc[i], dec[i], rng))
            c_up = dec[i]

    def __call__(self, enc_out: LidarEncoderOutput) -> DiffArray:
        if len(enc_out.skips) != 5 or len(enc_out.pool_maps) != 4:
            raise ValueError(
                f"decoder needs 5 skips and 4 pooling maps, got "
                f"{len(enc_out.skips)} and {len(enc_out.pool_maps)}"
            )
        h = enc_out.final
        for step, proj in enumerate(self.projs):
            stage = 3 - step  # index of the skip being fused
            h = nn.gather_rows(h, enc_out.pool_maps[stage])
            h = ad.gelu(proj(ad.concat([h, enc_out.skips[stage]], axis=-1)))
        return h


def lidar_decode(enc_out: LidarEncoderOutput, decoder: LidarDecoder) -> DiffArray:
    return decoder(enc_out)
