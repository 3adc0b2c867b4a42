"""Command-line entry point: generate, train, eval, ablate, corrupt-eval, init-config."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ABLATION_ROWS, ConfigError, ModelConfig
from .corruption import KINDS, SEVERITIES, CorruptionSpec
from .losses import NonFiniteLossError
from .metrics import format_report
from .model import build_model, parameter_count
from .scene import generate_scene, render_views, save_grid, voxelize_labels
from .training import (
    DEFAULT_RANGES,
    CheckpointError,
    evaluate,
    load_checkpoint,
    make_dataset,
    save_checkpoint,
    scene_seed,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _load_config(path: Optional[str]) -> ModelConfig:
    return ModelConfig() if path is None else ModelConfig.load(path)


def cmd_init_config(args) -> int:
    ModelConfig().save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = config.rig()
    for i in range(args.scenes):
        seed = scene_seed(args.seed, i)
        scene = generate_scene(seed, config.grid, config.class_set, config.n_frames, config.train.n_boxes, rig=rig)
        views = [render_views(scene, rig, f) for f in range(config.n_frames)]
        np.savez(
            out / f"scene_{i:03d}_views.npz",
            left=np.stack([lv.image for lv, _ in views]).astype(np.float32),
            right=views[0][1].image.astype(np.float32),
            depth=views[0][0].depth_gt.astype(np.float32),
        )
        save_grid(voxelize_labels(scene, config.grid), config.grid, out / f"scene_{i:03d}.cdsc", config.class_set.M + 1)
        print(f"scene {i}: seed={seed} fingerprint={scene.fingerprint()}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None

    def report(step, rec):
        if step % args.log_every == 0 or step == args.steps - 1:
            print(f"step {step:5d}  lr {rec['lr']:.2e}  loss {rec['total']:.4f}", flush=True)

    ckpt = train(config, args.dataset_seed, args.steps, resume=resume, stop_at=args.stop_at, callback=report)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    with open(out / "history.jsonl", "w") as fh:
        for rec in ckpt.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"saved {out / 'checkpoint.ckpt'} at step {ckpt.step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    values = evaluate(ckpt, args.seed, args.scenes, args.ranges)
    text = format_report(values)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def smoothed_blocks(losses: Sequence[float], n_blocks: int = 5) -> List[float]:
    """Means of `n_blocks` equal consecutive blocks of a loss trace."""
    size = len(losses) // n_blocks
    if size == 0:
        raise ValueError("trace shorter than the number of blocks")
    return [float(np.mean(losses[i * size : (i + 1) * size])) for i in range(n_blocks)]


def ablation_table(rows: Sequence[str], steps: int, config: ModelConfig, eval_scenes: bool = True) -> str:
    dataset = make_dataset(config, config.train.dataset_seed, config.train.n_scenes)
    header = f"{'row':<9}{'LMMs':>5}{'Dyna':>5}{'Stat':>5}{'DSAF':>5}{'params':>9}{'loss0':>9}{'lossN':>9}{'mIoU':>8}{'geoIoU':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {row!r}; expected one of {sorted(ABLATION_ROWS)}")
        flags = ABLATION_ROWS[row]
        cfg = config.replace(ablation=flags)
        ckpt = train(cfg, steps=steps, dataset=dataset)
        blocks = smoothed_blocks([h["total"] for h in ckpt.history], min(5, steps))
        miou = geo = float("nan")
        if eval_scenes:
            values = evaluate(ckpt, samples=dataset)
            miou, geo = values["miou"], values["geo_iou"]
        mark = lambda b: "x" if b else "-"  # noqa: E731
        lines.append(
            f"{row:<9}{mark(flags.use_lmms):>5}{mark(flags.use_dynamic):>5}{mark(flags.use_static):>5}"
            f"{mark(flags.use_dsaf):>5}{parameter_count(build_model(cfg)):>9d}{blocks[0]:>9.4f}{blocks[-1]:>9.4f}"
            f"{miou:>8.4f}{geo:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    print(ablation_table(args.rows, args.steps, _load_config(args.config)), end="")
    return EXIT_OK


def cmd_corrupt_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    seed = config.train.dataset_seed if args.seed is None else args.seed
    samples = make_dataset(config, seed, config.train.n_scenes if args.scenes is None else args.scenes)
    clean = evaluate(ckpt, samples=samples, ranges=())
    lines = [f"{'corruption':<12}{'severity':>9}{'mIoU':>9}{'geoIoU':>9}", f"{'clean':<12}{'-':>9}{clean['miou']:>9.4f}{clean['geo_iou']:>9.4f}"]
    for kind in args.types:
        for sev in args.severities:
            v = evaluate(ckpt, samples=samples, ranges=(), corruption=CorruptionSpec(kind, sev))
            lines.append(f"{kind:<12}{sev:>9d}{v['miou']:>9.4f}{v['geo_iou']:>9.4f}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynstat-ssc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the default config file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("generate", help="render synthetic scenes and label grids")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=4)
    s.add_argument("--config")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train on fixed synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--dataset-seed", type=int)
    s.add_argument("--resume")
    s.add_argument("--stop-at", type=int)
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on synthetic scenes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--ranges", type=_csv(float), default=list(DEFAULT_RANGES))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and score ablation rows")
    s.add_argument("--rows", type=_csv(str), default=list(ABLATION_ROWS))
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("corrupt-eval", help="score a checkpoint under photometric corruptions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--types", type=_csv(str), default=list(KINDS))
    s.add_argument("--severities", type=_csv(int), default=list(SEVERITIES))
    s.add_argument("--scenes", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_corrupt_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
