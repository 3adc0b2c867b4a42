import json
import subprocess
import sys

import numpy as np
import pytest
import torch

import dynstat_ssc.training as training
from dynstat_ssc.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main, smoothed_blocks
from dynstat_ssc.config import ConfigError, ModelConfig, TrainConfig
from dynstat_ssc.losses import NonFiniteLossError
from dynstat_ssc.metrics import parse_report
from dynstat_ssc.scene import load_grid
from dynstat_ssc.training import (
    CheckpointError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    evaluate,
    load_checkpoint,
    lr_at,
    make_dataset,
    sample_points,
    save_checkpoint,
    scene_seed,
    train,
)

SMALL = ModelConfig(train=TrainConfig(n_scenes=1))


def test_lr_schedule():
    lrs = [lr_at(s, 100, 1e-4, (0.6, 0.85), 0.1) for s in range(100)]
    assert lrs[0] == 1e-4 and lrs[59] == 1e-4 and lrs[60] == pytest.approx(1e-5)
    assert lrs[-1] == pytest.approx(1e-6, rel=1e-12)
    assert lrs == sorted(lrs, reverse=True)


def test_scene_seeds_distinct_and_stable():
    seeds = [scene_seed(0, i) for i in range(8)]
    assert len(set(seeds)) == 8 and seeds == [scene_seed(0, i) for i in range(8)]
    assert scene_seed(1, 0) != seeds[0]


def test_sample_points_labels():
    labels = torch.zeros(32, 32, 8, dtype=torch.int64)
    labels[3, 4, 1] = 2
    labels[10, 20, 0] = 1
    points, point_labels = sample_points(labels, ModelConfig(), torch.Generator().manual_seed(0))
    assert points.shape == (1, 4, 3) and point_labels[:2].tolist() == [2, 1]
    spec = ModelConfig().grid
    ijk = np.floor((points[0].numpy() - spec.origin) / spec.voxel_size).astype(int)
    assert [int(labels[tuple(i)]) for i in ijk] == point_labels.tolist()


def test_trace_deterministic_and_decreasing():
    a = train(SMALL, steps=6)
    b = train(SMALL, steps=6)
    assert a.history == b.history
    assert all(torch.equal(a.parameters[k], b.parameters[k]) for k in a.parameters)
    assert a.history[-1]["total"] < a.history[0]["total"]
    assert set(a.history[0]) >= {"step", "lr", "scal_sem", "scal_geo", "ce", "depth_d", "depth_s",
                                 "point_ce", "point_lovasz", "total"}


def test_resume_guards():
    ckpt = train(SMALL, steps=4, stop_at=2)
    assert ckpt.step == 2 and len(ckpt.history) == 2
    with pytest.raises(ConfigError):
        train(SMALL.replace(seed=1), steps=4, resume=ckpt)
    with pytest.raises(ConfigError):
        train(SMALL, steps=5, resume=ckpt)
    with pytest.raises(ConfigError):
        train(SMALL, steps=0)


def test_checkpoint_bytes_stable_and_validated(tmp_path):
    ckpt = train(SMALL, steps=2)
    data = checkpoint_bytes(ckpt)
    assert checkpoint_bytes(checkpoint_from_bytes(data)) == data
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == data
    assert load_checkpoint(tmp_path / "c.ckpt").history == ckpt.history
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"garbage" + data)
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(data[:-100])


def test_nan_abort_names_component(monkeypatch):
    def bad_bce(D, depth_gt, bins):
        return D.sum() * float("nan"), True

    monkeypatch.setattr(training, "depth_bce", bad_bce)
    with pytest.raises(NonFiniteLossError, match="depth_d"):
        train(SMALL, steps=2)


def test_evaluate_keys_and_determinism():
    ckpt = train(SMALL, steps=1)
    samples = make_dataset(SMALL, 5, 1)
    a = evaluate(ckpt, samples=samples)
    b = evaluate(ckpt, samples=samples)
    assert a == b
    assert {"miou", "geo_iou", "precision", "recall", "iou_class_1", "range_3.2/miou", "range_12.8/recall"} <= set(a)
    assert all(-1.0 <= v <= 1.0 for v in a.values())
    with pytest.raises(ConfigError):
        evaluate(train(ModelConfig(grid=SMALL.grid.scaled(2), train=TrainConfig(n_scenes=1)), steps=1), samples=samples)


def test_smoothed_blocks():
    assert smoothed_blocks(list(range(10)), 5) == [0.5, 2.5, 4.5, 6.5, 8.5]
    with pytest.raises(ValueError):
        smoothed_blocks([1.0, 2.0], 5)


# command line -----------------------------------------------------------
@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    assert main(["init-config", "--out", str(cfg)]) == EXIT_OK
    SMALL.save(cfg)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run"), "--steps", "3", "--log-every", "1"]) == EXIT_OK
    return root


def test_cli_generate(tmp_path, capsys):
    assert main(["generate", "--seed", "3", "--out", str(tmp_path), "--scenes", "2"]) == EXIT_OK
    views = np.load(tmp_path / "scene_000_views.npz")
    assert views["left"].shape == (3, 3, 64, 128) and views["right"].shape == (3, 64, 128)
    grid, spec = load_grid(tmp_path / "scene_001.cdsc")
    assert grid.shape == (32, 32, 8) and spec == ModelConfig().grid
    assert "fingerprint" in capsys.readouterr().out


def test_cli_train_outputs(cli_run):
    lines = (cli_run / "run" / "history.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [0, 1, 2]
    assert load_checkpoint(cli_run / "run" / "checkpoint.ckpt").step == 3


def test_cli_resume_matches(cli_run, tmp_path):
    cfg = str(cli_run / "config.json")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a"), "--steps", "3", "--stop-at", "1"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--steps", "3",
                 "--resume", str(tmp_path / "a" / "checkpoint.ckpt")]) == EXIT_OK
    assert (tmp_path / "b" / "checkpoint.ckpt").read_bytes() == (cli_run / "run" / "checkpoint.ckpt").read_bytes()


def test_cli_eval(cli_run, tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert main(["eval", "--checkpoint", str(cli_run / "run" / "checkpoint.ckpt"), "--scenes", "1",
                 "--ranges", "3.2,12.8", "--out", str(out)]) == EXIT_OK
    values = parse_report(out.read_text())
    assert "range_3.2/miou" in values and "range_6.4/miou" not in values
    assert capsys.readouterr().out == out.read_text()


def test_cli_corrupt_eval(cli_run, capsys):
    assert main(["corrupt-eval", "--checkpoint", str(cli_run / "run" / "checkpoint.ckpt"), "--types", "dark",
                 "--severities", "1,5", "--scenes", "1"]) == EXIT_OK
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[1].split()[0] == "clean" and [r.split()[:2] for r in rows[2:]] == [["dark", "1"], ["dark", "5"]]


def test_cli_ablate(cli_run, capsys):
    assert main(["ablate", "--rows", "baseline,e", "--steps", "5", "--config", str(cli_run / "config.json")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["row", "LMMs", "Dyna", "Stat", "DSAF", "params", "loss0", "lossN", "mIoU", "geoIoU"]
    assert [line.split()[0] for line in lines[2:]] == ["baseline", "e"]
    assert all(len(line.split()) == 10 for line in lines[2:])


def test_cli_exit_codes(tmp_path, cli_run, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    data = SMALL.to_dict()
    data["bogus"] = 1
    bad.write_text(json.dumps(data))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path), "--steps", "1"]) == EXIT_CONFIG
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == EXIT_CONFIG
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_CONFIG
    assert main(["ablate", "--rows", "zzz", "--steps", "5", "--config", str(cli_run / "config.json")]) == EXIT_CONFIG
    assert main(["corrupt-eval", "--checkpoint", str(cli_run / "run" / "checkpoint.ckpt"), "--types", "fog"]) == EXIT_CONFIG

    monkeypatch.setattr(training, "depth_bce", lambda D, g, b: (D.sum() * float("inf"), True))
    assert main(["train", "--config", str(cli_run / "config.json"), "--out", str(tmp_path / "nan"), "--steps", "2"]) == EXIT_NUMERIC
    assert "depth_d" in capsys.readouterr().err


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dynstat_ssc", "--help"], capture_output=True, text=True, check=True)
    for verb in ("init-config", "generate", "train", "eval", "ablate", "corrupt-eval"):
        assert verb in out.stdout
