"""Acceptance suite: eight release gates, one test (one pass/fail line) each.

1. space-filling-curve codecs: bijective, Hilbert-adjacent, locality compared
2. finite-difference gradient checks for every op and each composite block
3. loss and schedule oracles (Lovász, cross-entropy, cosine endpoints)
4. staged-training contract (checkpoint gate + frozen backbones)
5. desk-scale overfit: >= 95% train accuracy, bit-identical reruns, < 10 min
6. fused head beats the LiDAR-only auxiliary head by >= 10 mIoU held out
7. test-time augmentation: identity variant exact, 8 variants don't degrade
8. mIoU agrees with a brute-force counting oracle

Tolerances are pinned in the asserts; each test prints its measured numbers.
"""

import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from segfusion import curves, nn
from segfusion.augment import tta_config_for_count
from segfusion.backbones import (
    FeaturePyramid,
    ImageEncoder,
    ImageEncoderConfig,
    ImageNeck,
    ImageNeckConfig,
    LidarEncoderConfig,
    LidarStage,
)
from segfusion.fusion import GFFM, SFAM, SFFM, FusedPointFeatures, SemanticEmbeddings
from segfusion.harness.config import RunConfig
from segfusion.harness.metrics import confusion_matrix, metrics_from_confusion
from segfusion.harness.scene import NUM_CLASSES, SceneSpec, generate_scene
from segfusion.harness.train import (
    BACKBONE_PREFIXES,
    STAGES,
    build_model,
    evaluate_miou,
    param_digests,
    read_manifest,
    run_stage,
    stage_config,
)
from segfusion.nn import autodiff as ad


# ---------------------------------------------------------------------------
# criterion 1: curve codecs
# ---------------------------------------------------------------------------


def _cell_grid(bits):
    g = np.arange(1 << bits)
    ix, iy, iz = np.meshgrid(g, g, g, indexing="ij")
    return ix.ravel(), iy.ravel(), iz.ravel()


def test_criterion_1_curve_codecs_bijective_adjacent_local():
    t0 = time.perf_counter()
    for bits in (3, 4):
        ix, iy, iz = _cell_grid(bits)
        domain = np.arange((1 << bits) ** 3)
        for kind in ("z", "hilbert"):
            codes = curves.encode_cells(ix, iy, iz, kind, bits)
            np.testing.assert_array_equal(np.sort(codes), domain)
            dx, dy, dz = curves.decode_cells(codes, kind, bits)
            np.testing.assert_array_equal(dx, ix)
            np.testing.assert_array_equal(dy, iy)
            np.testing.assert_array_equal(dz, iz)

    # consecutive Hilbert codes visit face-adjacent cells, exhaustively
    hx, hy, hz = (
        np.asarray(a, dtype=np.int64)
        for a in curves.decode_cells(np.arange(512), "hilbert", 3)
    )
    steps = np.abs(np.diff(hx)) + np.abs(np.diff(hy)) + np.abs(np.diff(hz))
    assert steps.shape == (511,)
    np.testing.assert_array_equal(steps, 1)

    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"curve suite took {elapsed:.2f}s"

    # locality: mean |code difference| across face-adjacent cell pairs, bits=3
    ix, iy, iz = _cell_grid(3)
    gap = {}
    for kind in ("z", "hilbert"):
        grid = np.empty((8, 8, 8), dtype=np.int64)
        grid[ix, iy, iz] = curves.encode_cells(ix, iy, iz, kind, 3)
        diffs = [np.abs(np.diff(grid, axis=a)).ravel() for a in range(3)]
        gap[kind] = float(np.concatenate(diffs).mean())
    print(
        f"criterion 1: round trips ok, adjacency ok, {elapsed:.2f}s; "
        f"adjacent-cell code gap hilbert={gap['hilbert']:.3f} z={gap['z']:.3f}"
    )
    assert gap["hilbert"] < gap["z"], (
        f"hilbert mean adjacent-cell code gap {gap['hilbert']:.3f} is not below "
        f"morton's {gap['z']:.3f} at bits=3 (measured on the exhaustive 8x8x8 grid)"
    )


# ---------------------------------------------------------------------------
# criterion 2: gradient suite
# ---------------------------------------------------------------------------


def _scal(expr, probe):
    return ad.sum_(ad.mul(expr, ad.constant(probe)))


def _op_checks(rng):
    # probes are fixed up front: the checked function must be deterministic
    a34 = rng.normal(size=(3, 4))
    b4 = rng.normal(size=(4,))
    denom = rng.normal(size=(3, 4))
    denom += np.sign(denom) * 0.5
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    away = rng.normal(size=(4, 5))
    away += np.sign(away) * 0.3
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 2] = mask[1, 0] = mask[2, 4] = False
    rows, cols = np.array([0, 1, 2]), np.array([1, 0, 2])
    gather_idx = np.array([0, 2, 2, 1])
    scatter_idx = np.array([0, 2, 4])
    seg = np.array([0, 0, 1, 2, 2, 2])
    u = rng.integers(0, 6, size=9) + rng.uniform(0.3, 0.7, size=9)
    v = rng.integers(0, 5, size=9) + rng.uniform(0.3, 0.7, size=9)
    conv_x, conv_w, conv_b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))
    p34 = rng.normal(size=(3, 4))
    p35 = rng.normal(size=(3, 5))
    p36 = rng.normal(size=(3, 6))
    p45 = rng.normal(size=(4, 5))
    p44 = rng.normal(size=(4, 4))
    p46 = rng.normal(size=(4, 6))
    p43 = rng.normal(size=(4, 3))
    p54 = rng.normal(size=(5, 4))
    p31 = rng.normal(size=(3, 1))
    p3 = rng.normal(size=3)
    p4 = rng.normal(size=4)
    p22 = rng.normal(size=(2, 2))
    p93 = rng.normal(size=(9, 3))
    p423 = rng.normal(size=(4, 2, 3))
    p333 = rng.normal(size=(3, 3, 3))
    p266 = rng.normal(size=(2, 6, 6))

    return [
        ("add", lambda x, y: _scal(ad.add(x, y), p34), [a34, b4]),
        ("sub", lambda x, y: _scal(ad.sub(x, y), p34), [a34, b4]),
        ("mul", lambda x, y: _scal(ad.mul(x, y), p34), [a34, b4]),
        ("div", lambda x, y: _scal(ad.div(x, y), p34), [a34, denom]),
        ("matmul", lambda x, y: _scal(ad.matmul(x, y), p35), [a34, rng.normal(size=(4, 5))]),
        ("concat", lambda x, y: _scal(ad.concat([x, y], axis=1), p36), [rng.normal(size=(3, 2)), a34]),
        ("reshape", lambda x: _scal(ad.reshape(x, (3, 4)), p34), [rng.normal(size=12)]),
        ("transpose", lambda x: _scal(ad.transpose(x, (2, 0, 1)), p423), [rng.normal(size=(2, 3, 4))]),
        ("slice", lambda x: _scal(x[1:3, ::2], p22), [a34]),
        ("gather_rows", lambda x: _scal(ad.gather_rows(x, gather_idx), p44), [a34]),
        ("take_pairs", lambda x: _scal(ad.take_pairs(x, rows, cols), p3), [a34]),
        ("scatter_rows", lambda x: _scal(ad.scatter_rows(scatter_idx, x, 5), p54), [rng.normal(size=(3, 4))]),
        ("segment_mean", lambda x: _scal(ad.segment_mean(x, seg, 4), p43), [rng.normal(size=(6, 3))]),
        ("relu", lambda x: _scal(ad.relu(x), p45), [away]),
        ("gelu", lambda x: _scal(ad.gelu(x), p45), [rng.normal(size=(4, 5))]),
        ("exp", lambda x: _scal(ad.exp(x), p34), [a34]),
        ("log", lambda x: _scal(ad.log(x), p34), [pos]),
        ("softmax", lambda x: _scal(ad.softmax(x, axis=-1), p35), [rng.normal(size=(3, 5))]),
        ("softmax_masked", lambda x: _scal(ad.softmax(x, axis=-1, mask=mask), p35), [rng.normal(size=(3, 5))]),
        ("layer_norm", lambda x, g, b: _scal(ad.layer_norm(x, g, b), p46), [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)]),
        ("mean", lambda x: _scal(ad.mean(x, axis=1, keepdims=True), p31), [a34]),
        ("sum", lambda x: _scal(ad.sum_(x, axis=0), p4), [a34]),
        ("bilinear_gather", lambda f: _scal(ad.bilinear_gather(f, u, v), p93), [rng.normal(size=(3, 6, 7))]),
        ("conv2d", lambda x, w, b: _scal(ad.conv2d(x, w, b, stride=2, pad=1), p333), [conv_x, conv_w, conv_b]),
        ("upsample_nearest2", lambda x: _scal(ad.upsample_nearest2(x), p266), [rng.normal(size=(2, 3, 3))]),
    ]


def _composite_checks(rng):
    checks = []
    n, d_l, d_c, d_f, k = 7, 6, 5, 8, 4
    mask = np.array([True, True, False, True, False, True, True])
    p_geo = rng.normal(size=(n, d_f))

    gffm = GFFM(d_l, d_c, d_f, np.random.default_rng(0))
    checks.append(
        ("GFFM", lambda lf, cf: _scal(gffm(lf, cf, mask).geo, p_geo),
         [rng.normal(size=(n, d_l)), rng.normal(size=(n, d_c))])
    )

    sfam = SFAM(d_l, d_f, np.random.default_rng(1))
    p_emb = rng.normal(size=(k, d_f))
    checks.append(
        ("SFAM", lambda f, lg: _scal(sfam(f, lg).embed, p_emb),
         [rng.normal(size=(n, d_l)), rng.normal(size=(n, k))])
    )

    sffm = SFFM(d_f, heads=2, rng=np.random.default_rng(2), use_ffn=True)
    presence = np.ones(k, dtype=bool)

    def sffm_fn(geo, el, ec):
        fused = FusedPointFeatures(geo=geo, mask=mask)
        sl = SemanticEmbeddings(embed=el, pooled=el, presence=presence)
        sc = SemanticEmbeddings(embed=ec, pooled=ec, presence=presence)
        return _scal(sffm(fused, sl, sc), p_geo)

    checks.append(
        ("SFFM", sffm_fn,
         [rng.normal(size=(n, d_f)), rng.normal(size=(k, d_f)), rng.normal(size=(k, d_f))])
    )

    enc_cfg = ImageEncoderConfig(stage_channels=(4, 6, 8, 12, 16), stem_channels=3, seed=0)
    enc = ImageEncoder(enc_cfg)
    neck = ImageNeck(enc_cfg, ImageNeckConfig(out_channels=(4, 6, 8, 12), seed=0))
    pyramid = enc(rng.uniform(0.0, 1.0, size=(32, 32, 3)))
    scales = pyramid.scales
    level_data = [np.asarray(lv.data) for lv in pyramid.levels]
    p_neck = rng.normal(size=neck(pyramid).shape)

    def neck_fn(*levels):
        return _scal(neck(FeaturePyramid(list(levels), scales)), p_neck)

    checks.append(("neck", neck_fn, level_data))

    lidar_cfg = LidarEncoderConfig(
        enc_channels=(8, 12, 16, 24, 32),
        dec_channels=(8, 12, 16, 24),
        group_size=4,
        heads=2,
        curve_kinds=("z",),
        base_cell=0.2,
        bits_per_axis=8,
        seed=0,
    )
    stage = LidarStage(5, 8, lidar_cfg, "z", 0.2, np.random.default_rng(3))
    xyz = rng.uniform(0.0, 2.0, size=(12, 3))
    p_stage = rng.normal(size=(12, 8))
    checks.append(
        ("encoder_stage", lambda f: _scal(stage(f, xyz), p_stage), [rng.normal(size=(12, 5))])
    )
    return checks


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst_op = 0.0
    for name, fn, inputs in _op_checks(rng):
        report = nn.finite_diff_check(fn, inputs, tol=1e-4)
        assert report.passed, f"op {name}: {report}"
        worst_op = max(worst_op, report.max_rel_err)
    worst_block = 0.0
    for name, fn, inputs in _composite_checks(rng):
        report = nn.finite_diff_check(fn, inputs, tol=1e-3)
        assert report.passed, f"composite {name}: {report}"
        worst_block = max(worst_block, report.max_rel_err)
    elapsed = time.perf_counter() - t0
    print(
        f"criterion 2: ops max rel err {worst_op:.3e} (<=1e-4), "
        f"composites {worst_block:.3e} (<=1e-3), {elapsed:.1f}s"
    )
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# criterion 3: loss and schedule oracles
# ---------------------------------------------------------------------------


def _lovasz_oracle(probs, labels):
    """Literal definition: per present class, descending-error sort weighted by
    the discrete Jaccard-loss differences of growing error prefixes."""
    present = np.unique(labels)
    total = 0.0
    for cls in present:
        fg = (labels == cls).astype(float)
        errors = np.where(fg == 1.0, 1.0 - probs[:, cls], probs[:, cls])
        order = np.argsort(-errors, kind="stable")
        e, g = errors[order], fg[order]
        gts = g.sum()
        inter = gts - np.cumsum(g)
        union = gts + np.cumsum(1.0 - g)
        jacc = 1.0 - inter / union
        weights = jacc.copy()
        weights[1:] = jacc[1:] - jacc[:-1]
        total += float(np.dot(e, weights))
    return total / len(present)


def test_criterion_3_loss_and_schedule_oracles():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        c = int(rng.integers(2, 5))
        probs = rng.dirichlet(np.ones(c), size=n)
        labels = rng.integers(0, c, size=n)
        got = float(nn.lovasz_softmax_loss(ad.constant(probs), labels).data)
        worst = max(worst, abs(got - _lovasz_oracle(probs, labels)))
    assert worst <= 1e-8, f"lovasz deviates from the sorted-Jaccard oracle by {worst:.3e}"

    worst_ce = 0.0
    for c in (2, 3, 4, 6, 11):
        logits = ad.constant(np.full((7, c), 0.37))
        loss = float(nn.cross_entropy_loss(logits, np.arange(7) % c).data)
        worst_ce = max(worst_ce, abs(loss - math.log(c)))
    assert worst_ce <= 1e-9, f"uniform-logit CE off ln C by {worst_ce:.3e}"

    sched = nn.ScheduleConfig(base_lr={"main": 8e-4, "block": 8e-5}, min_lr=0.0, total_steps=100)
    assert nn.cosine_lr(0, sched, "main") == 8e-4
    assert nn.cosine_lr(100, sched, "main") == 0.0
    assert nn.cosine_lr(50, sched, "main") == 4e-4
    assert nn.cosine_lr(0, sched, "block") == 8e-5
    assert nn.cosine_lr(50, sched, "block") == 4e-5
    print(
        f"criterion 3: lovasz oracle max |diff| {worst:.2e} (<=1e-8), "
        f"uniform CE max |diff| {worst_ce:.2e} (<=1e-9), cosine endpoints/midpoint exact"
    )


# ---------------------------------------------------------------------------
# criterion 4: staged-training contract
# ---------------------------------------------------------------------------

_TINY = dict(
    num_scenes=2,
    scene_points=96,
    lidar_enc_channels=(8, 12, 16, 24, 32),
    lidar_dec_channels=(8, 12, 16, 24),
    image_enc_channels=(8, 12, 16, 24, 32),
    image_stem_channels=4,
    image_neck_channels=(8, 12, 16, 24),
    group_size=8,
    attn_heads=2,
    d_fused=16,
    sffm_heads=2,
    augment=False,
    image_augment=False,
    main_lr=5e-3,
    block_lr=5e-3,
    lidar_epochs=1,
    image_epochs=1,
    fusion_epochs=1,
)


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def test_criterion_4_staged_training_contract(tmp_path):
    cfg = RunConfig(**_TINY)
    scenes = [generate_scene(SceneSpec(seed=i, num_points=96)) for i in range(2)]
    model = build_model(cfg)

    with pytest.raises(ValueError, match="lidar"):
        run_stage(model, scenes, stage_config(cfg, "fusion"), cfg, tmp_path)

    run_stage(model, scenes, stage_config(cfg, "lidar"), cfg, tmp_path)
    run_stage(model, scenes, stage_config(cfg, "image"), cfg, tmp_path)
    manifest = read_manifest(tmp_path)
    _, lidar_arrays, _ = nn.load_checkpoint(tmp_path / manifest["lidar"]["checkpoint"])
    _, image_arrays, _ = nn.load_checkpoint(tmp_path / manifest["image"]["checkpoint"])

    run_stage(model, scenes, stage_config(cfg, "fusion"), cfg, tmp_path)

    frozen = 0
    for p in model.parameters():
        if p.name.startswith(("lidar_enc.", "lidar_dec.")):
            assert _digest(p.data) == _digest(lidar_arrays[p.name]), p.name
            frozen += 1
        elif p.name.startswith(("image_enc.", "image_neck.")):
            assert _digest(p.data) == _digest(image_arrays[p.name]), p.name
            frozen += 1
    assert frozen > 0
    print(f"criterion 4: fusion refused without checkpoints; {frozen} backbone "
          f"parameter digests unchanged across the fusion stage")


# ---------------------------------------------------------------------------
# criteria 5-7: desk-scale three-stage pipeline
# ---------------------------------------------------------------------------

_DESK = dict(
    num_scenes=5,
    scene_points=512,
    lidar_enc_channels=(16, 24, 32, 48, 64),
    lidar_dec_channels=(24, 24, 32, 48),
    image_enc_channels=(12, 16, 24, 32, 48),
    image_stem_channels=8,
    image_neck_channels=(12, 16, 24, 32),
    group_size=16,
    attn_heads=2,
    d_fused=64,
    sffm_heads=2,
    head_hidden=48,
    crop_height=48,
    crop_width=64,
    augment=True,
    image_augment=False,
    batch_size=2,
    main_lr=2e-3,
    block_lr=5e-3,
    lidar_epochs=100,
    image_epochs=60,
    fusion_epochs=100,
)


@dataclass
class PipelineRun:
    seed: int
    cfg: RunConfig
    model: object
    train_scenes: list
    held_scenes: list
    out_dir: object
    seconds: float


def _train_pipeline(seed, out_dir):
    cfg = RunConfig(seed=seed, **_DESK)
    train_scenes = [
        generate_scene(SceneSpec(seed=seed * 1000 + i, num_points=cfg.scene_points))
        for i in range(cfg.num_scenes)
    ]
    held_scenes = [
        generate_scene(SceneSpec(seed=seed * 1000 + 500 + i, num_points=cfg.scene_points))
        for i in range(2)
    ]
    model = build_model(cfg)
    t0 = time.perf_counter()
    for stage in STAGES:
        run_stage(model, train_scenes, stage_config(cfg, stage), cfg, out_dir)
    seconds = time.perf_counter() - t0
    return PipelineRun(seed, cfg, model, train_scenes, held_scenes, out_dir, seconds)


@pytest.fixture(scope="module")
def seed0_run(tmp_path_factory):
    return _train_pipeline(0, tmp_path_factory.mktemp("accept-seed0"))


def test_criterion_5_overfit_fast_and_bit_identical(seed0_run, tmp_path_factory):
    run = seed0_run
    assert len(run.train_scenes) == 5
    assert NUM_CLASSES == 6
    for sc in run.train_scenes:
        assert len(sc.cloud) == 512
        assert len(sc.rig.cameras) == 2
        for cam in sc.rig.cameras:
            assert (cam.width, cam.height) == (64, 48)

    manifest = read_manifest(run.out_dir)
    fusion_steps = manifest["fusion"]["steps"]
    assert fusion_steps <= 300

    m = evaluate_miou(run.model, run.train_scenes, run.cfg)

    rerun = _train_pipeline(0, tmp_path_factory.mktemp("accept-seed0-rerun"))
    assert param_digests(run.model.parameters()) == param_digests(rerun.model.parameters())
    ckpt = manifest["fusion"]["checkpoint"]
    assert (run.out_dir / ckpt).read_bytes() == (rerun.out_dir / ckpt).read_bytes()

    total = run.seconds + rerun.seconds
    print(
        f"criterion 5: train accuracy {m.accuracy:.4f} (>=0.95) after {fusion_steps} "
        f"fusion steps (<=300); two runs bit-identical; {total:.0f}s total (<600)"
    )
    assert m.accuracy >= 0.95, f"train accuracy {m.accuracy:.4f} below 0.95"
    assert total < 600.0, f"pipeline runs took {total:.0f}s"


def test_criterion_6_fusion_beats_lidar_only_held_out(seed0_run, tmp_path_factory):
    gaps = {}
    for seed in (0, 1, 2):
        if seed == 0:
            run = seed0_run
        else:
            run = _train_pipeline(seed, tmp_path_factory.mktemp(f"accept-seed{seed}"))
        fused = evaluate_miou(run.model, run.held_scenes, run.cfg, head="main").miou
        lidar_only = evaluate_miou(run.model, run.held_scenes, run.cfg, head="aux_lidar").miou
        gaps[seed] = fused - lidar_only
        print(
            f"criterion 6: seed {seed} held-out mIoU fused {fused:.2f} vs "
            f"lidar-only {lidar_only:.2f} -> gap {gaps[seed]:+.2f} (>=10)"
        )
    assert all(g >= 10.0 for g in gaps.values()), gaps


def test_criterion_7_tta_identity_exact_and_no_degradation(seed0_run):
    run = seed0_run
    plain = evaluate_miou(run.model, run.train_scenes, run.cfg)
    tta1 = evaluate_miou(run.model, run.train_scenes, run.cfg, tta=tta_config_for_count(1))
    np.testing.assert_array_equal(plain.confusion, tta1.confusion)

    tta8 = evaluate_miou(run.model, run.train_scenes, run.cfg, tta=tta_config_for_count(8))
    drop = plain.miou - tta8.miou
    print(
        f"criterion 7: single-variant TTA bit-identical; 8-variant mIoU "
        f"{tta8.miou:.2f} vs plain {plain.miou:.2f} -> change {-drop:+.2f} (drop <=2)"
    )
    assert drop <= 2.0, f"8-variant TTA degrades mIoU by {drop:.2f} points"


# ---------------------------------------------------------------------------
# criterion 8: mIoU counting oracle
# ---------------------------------------------------------------------------


def test_criterion_8_miou_matches_counting_oracle():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 400))
        labels = rng.integers(0, k, size=n)
        preds = rng.integers(0, k, size=n)
        got = metrics_from_confusion(confusion_matrix(labels, preds, k)).miou

        ious = []
        for c in range(k):
            tp = int(np.sum((labels == c) & (preds == c)))
            fp = int(np.sum((labels != c) & (preds == c)))
            fn = int(np.sum((labels == c) & (preds != c)))
            if tp + fp + fn:
                ious.append(tp / (tp + fp + fn))
        want = 100.0 * float(np.mean(ious))
        worst = max(worst, abs(got - want))
    print(f"criterion 8: mIoU vs counting oracle max |diff| {worst:.2e} (<=1e-12)")
    assert worst <= 1e-12
