import json

import numpy as np
import pytest

from segfusion.harness.cli import main
from segfusion.harness.config import RunConfig, load_config, parse_config

TINY = """
num_scenes = 2
scene_points = 96
lidar_enc_channels = 8, 12, 16, 24, 32
lidar_dec_channels = 8, 12, 16, 24
image_enc_channels = 8, 12, 16, 24, 32
image_stem_channels = 4
image_neck_channels = 8, 12, 16, 24
group_size = 8
attn_heads = 2
d_fused = 16
sffm_heads = 2
augment = false
image_augment = false
main_lr = 0.005
block_lr = 0.005
lidar_epochs = 1
image_epochs = 1
fusion_epochs = 1
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ---------------------------------------------------------------------------
# usage errors
# ---------------------------------------------------------------------------


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["segment-all-the-things"]) == 2
    assert main([]) == 2


def test_unknown_flag_is_usage_error():
    assert main(["generate", "--out", "/tmp/x", "--frobnicate"]) == 2


def test_missing_required_argument():
    assert main(["train", "--stage", "lidar"]) == 2
    assert main(["train", "--stage", "warmup", "--data", "/tmp/a", "--out", "/tmp/b"]) == 2


def test_missing_config_file_is_operational_error(tmp_path, capsys):
    rc = main(["dump-config", "--config", str(tmp_path / "nope.cfg")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_bad_config_value_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("batch_size = sometimes\n")
    assert main(["dump-config", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "batch_size" in err


# ---------------------------------------------------------------------------
# dump-config
# ---------------------------------------------------------------------------


def test_dump_config_round_trips_defaults(capsys):
    assert main(["dump-config"]) == 0
    out = capsys.readouterr().out
    assert parse_config(out) == RunConfig()


def test_dump_config_reflects_overrides(tiny_config, capsys):
    assert main(["dump-config", "--config", str(tiny_config)]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.d_fused == 16
    assert cfg.num_scenes == 2
    assert cfg.augment is False


# ---------------------------------------------------------------------------
# end-to-end flow
# ---------------------------------------------------------------------------


def test_generate_train_eval_flow(tiny_config, tmp_path, capsys):
    data = tmp_path / "data"
    ckpts = tmp_path / "ckpts"
    cfg_arg = ["--config", str(tiny_config)]

    assert main(["generate", *cfg_arg, "--out", str(data)]) == 0
    assert (data / "manifest.json").exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2

    # fusion before its prerequisites is an operational error naming the stage
    rc = main(["train", *cfg_arg, "--stage", "fusion", "--data", str(data), "--out", str(ckpts)])
    assert rc == 1
    assert "lidar" in capsys.readouterr().err

    for stage in ("lidar", "image", "fusion"):
        assert main(["train", *cfg_arg, "--stage", stage, "--data", str(data), "--out", str(ckpts)]) == 0
        assert (ckpts / f"stage-{stage}-epoch-1.ckpt").exists()
    latest = json.loads((ckpts / "latest.json").read_text())
    assert set(latest) == {"lidar", "image", "fusion"}
    capsys.readouterr()

    csv_path = tmp_path / "eval.csv"
    args = ["eval", *cfg_arg, "--data", str(data), "--ckpt-dir", str(ckpts), "--csv", str(csv_path)]
    assert main(args) == 0
    plain = capsys.readouterr().out
    assert "mIoU" in plain
    assert csv_path.exists()

    # a single identity TTA variant must not change anything
    assert main([*args[:-2], "--tta", "1"]) == 0
    assert capsys.readouterr().out == plain

    # auxiliary heads are reachable
    assert main([*args[:-2], "--head", "aux_lidar"]) == 0
    assert main([*args[:-2], "--stage", "lidar", "--head", "aux_lidar"]) == 0
    capsys.readouterr()


def test_eval_without_training_names_the_stage(tiny_config, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(tiny_config), "--out", str(data)]) == 0
    capsys.readouterr()
    rc = main(["eval", "--config", str(tiny_config), "--data", str(data),
               "--ckpt-dir", str(tmp_path / "empty")])
    assert rc == 1
    assert "fusion" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def test_serialize_bench_runs(capsys):
    assert main(["serialize-bench"]) == 0
    out = capsys.readouterr().out
    for kind in ("z", "hilbert"):
        assert kind in out


def test_gradcheck_runs(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out.lower()
    assert "pass" in out
