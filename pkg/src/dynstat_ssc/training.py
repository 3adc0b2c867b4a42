"""Synthetic datasets, the training loop, deterministic checkpoints and evaluation."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, ModelConfig
from .corruption import CorruptionSpec, corrupt
from .depth import depth_at_feature_scale
from .losses import (
    IGNORE_LABEL,
    LossReport,
    NonFiniteLossError,
    depth_bce,
    point_loss,
    scal_loss,
    total_loss,
    voxel_ce,
)
from .metrics import ConfusionMatrix, accumulate, evaluate_confusion, range_eval
from .model import ModelOutput, SSCModel, ViewBatch, build_model
from .scene import CameraRig, generate_scene, render_views, voxelize_labels
from .semantic import ENCODER_STRIDE

DEFAULT_RANGES = (3.2, 6.4, 12.8)


# data ------------------------------------------------------------------
@dataclass
class Sample:
    batch: ViewBatch  # one scene
    depth_gt: torch.Tensor  # (1, h, w) at feature scale, 0 = unsupervised
    labels: torch.Tensor  # (X, Y, Z) int64
    scene_seed: int


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def make_sample(config: ModelConfig, seed: int, rig: Optional[CameraRig] = None) -> Sample:
    rig = rig or config.rig()
    scene = generate_scene(seed, config.grid, config.class_set, config.n_frames, config.train.n_boxes, rig=rig)
    lefts, right, depth = [], None, None
    for frame in range(config.n_frames):
        lv, rv = render_views(scene, rig, frame)
        lefts.append(torch.from_numpy(lv.image).float())
        if frame == 0:
            right = torch.from_numpy(rv.image).float()
            depth = torch.from_numpy(lv.depth_gt).float()
    batch = ViewBatch(torch.stack(lefts)[None], right[None], rig)
    labels = torch.from_numpy(voxelize_labels(scene, config.grid, frame=0).astype(np.int64))
    return Sample(batch, depth_at_feature_scale(depth[None], ENCODER_STRIDE), labels, seed)


def make_dataset(config: ModelConfig, dataset_seed: int, n_scenes: int) -> List[Sample]:
    rig = config.rig()
    return [make_sample(config, scene_seed(dataset_seed, i), rig) for i in range(n_scenes)]


def sample_points(labels: torch.Tensor, config: ModelConfig, generator: torch.Generator):
    """Non-empty voxel centers plus as many uniform points in the grid, with their voxel labels."""
    spec = config.grid
    origin = torch.tensor(spec.origin, dtype=torch.float32)
    size = torch.tensor(spec.voxel_size, dtype=torch.float32)
    occupied = torch.nonzero((labels != 0) & (labels != IGNORE_LABEL))
    centers = origin + (occupied.float() + 0.5) * size
    extent = torch.tensor(spec.extent, dtype=torch.float32)
    rand = origin + torch.rand(len(occupied), 3, generator=generator) * extent
    dims = torch.tensor(spec.dims)
    ijk = torch.minimum(((rand - origin) / size).long(), dims - 1)
    points = torch.cat([centers, rand])
    point_labels = torch.cat([labels[tuple(occupied.T)], labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]]])
    return points[None], point_labels


def compute_losses(model: SSCModel, out: ModelOutput, sample: Sample, point_labels: torch.Tensor) -> LossReport:
    cfg = model.config
    n_out = out.logits.shape[1]
    labels = sample.labels[None]
    probs = out.logits.softmax(dim=1).movedim(1, -1).reshape(-1, n_out)
    flat = labels.reshape(-1)
    zero = out.logits.sum() * 0.0

    def depth_term(D):
        if D is None:
            return zero
        return depth_bce(D, sample.depth_gt, model.bins)[0]

    if out.F_point is not None:
        p_ce, p_lov = point_loss(out.F_point, out.V_point, point_labels, model.point_head)
    else:
        p_ce = p_lov = zero
    report = LossReport(
        scal_sem=scal_loss(probs, flat, "sem"),
        scal_geo=scal_loss(probs, flat, "geo"),
        ce=voxel_ce(out.logits, labels),
        depth_d=depth_term(out.D_mono),
        depth_s=depth_term(out.D_stereo),
        point_ce=p_ce,
        point_lovasz=p_lov,
    )
    report.total = total_loss(report, cfg.loss_weights)
    return report


# schedule --------------------------------------------------------------
def lr_at(step: int, total_steps: int, base_lr: float, milestones: Sequence[float], gamma: float) -> float:
    """Learning rate for 0-based `step`; decays by `gamma` at each milestone fraction of `total_steps`."""
    lr = base_lr
    for m in milestones:
        if step >= int(round(m * total_steps)):
            lr *= gamma
    return lr


# checkpoints -----------------------------------------------------------
CKPT_MAGIC = b"DSSCCKPT"
CKPT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: Dict[str, torch.Tensor]
    optimizer: dict
    step: int
    total_steps: int
    history: List[Dict[str, float]] = field(default_factory=list)
    version: int = CKPT_VERSION


def _tensor_entry(name: str, t: torch.Tensor, offset: int):
    t = t.detach().contiguous()
    dtype = str(t.dtype).replace("torch.", "")
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype} for {name}")
    blob = t.numpy().tobytes()
    return {"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)}, blob


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Header JSON (sorted keys) followed by raw little-endian tensor blobs in a fixed order."""
    tensors = [(f"param/{k}", v) for k, v in ckpt.parameters.items()]
    state = ckpt.optimizer.get("state", {})
    opt_scalars = {}
    for idx in sorted(state, key=int):
        for key in sorted(state[idx]):
            value = state[idx][key]
            if torch.is_tensor(value):
                tensors.append((f"optim/{idx}/{key}", value))
            else:
                opt_scalars[f"{idx}/{key}"] = value
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        entry, blob = _tensor_entry(name, t, offset)
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "total_steps": ckpt.total_steps,
        "history": ckpt.history,
        "param_groups": ckpt.optimizer.get("param_groups", []),
        "optimizer_scalars": opt_scalars,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 8
    header = json.loads(data[start : start + n])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    body = memoryview(data)[start + n :]
    params, state = {}, {}
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError("checkpoint is truncated")
        t = torch.frombuffer(bytearray(chunk), dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]) if e["nbytes"] else \
            torch.zeros(e["shape"], dtype=_DTYPES[e["dtype"]])
        kind, _, rest = e["name"].partition("/")
        if kind == "param":
            params[rest] = t
        else:
            idx, _, key = rest.partition("/")
            state.setdefault(int(idx), {})[key] = t
    for name, value in header["optimizer_scalars"].items():
        idx, _, key = name.partition("/")
        state.setdefault(int(idx), {})[key] = value
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        parameters=params,
        optimizer={"state": state, "param_groups": header["param_groups"]},
        step=header["step"],
        total_steps=header["total_steps"],
        history=header["history"],
        version=header["version"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> SSCModel:
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.parameters, strict=True)
    return model


def _snapshot(model, optimizer, config, step, total_steps, history) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt = optimizer.state_dict()
    opt = {
        "state": {i: {k: (v.clone() if torch.is_tensor(v) else v) for k, v in s.items()} for i, s in opt["state"].items()},
        "param_groups": json.loads(json.dumps(opt["param_groups"])),
    }
    return Checkpoint(config, params, opt, step, total_steps, [dict(h) for h in history])


# training --------------------------------------------------------------
def _optimizer(model: SSCModel, config: ModelConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.train.lr, weight_decay=config.train.weight_decay)


def _step_generator(config: ModelConfig, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, step]).generate_state(1)[0]))


def train(
    config: ModelConfig,
    dataset_seed: Optional[int] = None,
    steps: int = 100,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    dataset: Optional[List[Sample]] = None,
    callback: Optional[Callable[[int, Dict[str, float]], None]] = None,
) -> Checkpoint:
    """Train on a fixed set of synthetic scenes, cycling one scene per step.

    `steps` is the schedule length; `stop_at` ends the call early (for
    checkpoint/resume) without changing the schedule. Returns the final
    checkpoint, whose `history` holds per-step loss components and lr.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if dataset_seed is None:
        dataset_seed = config.train.dataset_seed
    model = build_model(config)
    optimizer = _optimizer(model, config)
    start, history = 0, []
    if resume is not None:
        if resume.config != config:
            raise ConfigError("checkpoint was trained with a different config")
        if resume.total_steps != steps:
            raise ConfigError(f"checkpoint schedule has {resume.total_steps} steps, requested {steps}")
        model.load_state_dict(resume.parameters, strict=True)
        optimizer.load_state_dict(resume.optimizer)
        start, history = resume.step, [dict(h) for h in resume.history]
    if dataset is None:
        dataset = make_dataset(config, dataset_seed, config.train.n_scenes)
    end = steps if stop_at is None else min(stop_at, steps)
    tc = config.train
    model.train()
    for step in range(start, end):
        lr = lr_at(step, steps, tc.lr, tc.milestones, tc.gamma)
        for group in optimizer.param_groups:
            group["lr"] = lr
        sample = dataset[step % len(dataset)]
        points, point_labels = sample_points(sample.labels, config, _step_generator(config, step))
        out = model(sample.batch, points)
        report = compute_losses(model, out, sample, point_labels)
        optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        optimizer.step()
        record = {"step": step, "lr": lr, **report.as_floats()}
        history.append(record)
        if callback is not None:
            callback(step, record)
    return _snapshot(model, optimizer, config, end, steps, history)


# evaluation ------------------------------------------------------------
def predict_scenes(model: SSCModel, samples: Sequence[Sample], corruption: Optional[CorruptionSpec] = None):
    model.eval()
    preds = []
    for s in samples:
        batch = s.batch
        if corruption is not None:
            batch = ViewBatch(corrupt(batch.left, corruption), corrupt(batch.right, corruption), batch.rig)
        preds.append(model.predict(batch)[0].numpy())
    return preds


def evaluate(
    ckpt: Checkpoint,
    eval_seed: Optional[int] = None,
    n_scenes: Optional[int] = None,
    ranges: Sequence[float] = DEFAULT_RANGES,
    corruption: Optional[CorruptionSpec] = None,
    samples: Optional[List[Sample]] = None,
) -> Dict[str, float]:
    """Full-grid report plus one report per forward range, as a flat metric dict."""
    config = ckpt.config
    model = model_from_checkpoint(ckpt)
    if samples is None:
        seed = config.train.dataset_seed if eval_seed is None else eval_seed
        samples = make_dataset(config, seed, config.train.n_scenes if n_scenes is None else n_scenes)
    for s in samples:
        if tuple(s.labels.shape) != tuple(config.grid.dims):
            raise ConfigError("evaluation grid does not match the checkpoint config")
    preds = predict_scenes(model, samples, corruption)
    gts = [s.labels.numpy() for s in samples]
    n_classes = config.class_set.M + 1
    conf = ConfusionMatrix(n_classes)
    for p, g in zip(preds, gts):
        accumulate(conf, p, g)
    values = evaluate_confusion(conf).to_dict()
    for r, rep in zip(ranges, range_eval(preds, gts, config.grid, ranges, n_classes)):
        values.update(rep.to_dict(prefix=f"range_{r:g}/"))
    return values


# Toy overfit recipe (4 scenes, default grid); pinned by a measured run.
OVERFIT_STEPS = 1500
OVERFIT_LR = 1e-3


def overfit_config(config: Optional[ModelConfig] = None) -> ModelConfig:
    config = config or ModelConfig()
    return config.replace(train=replace(config.train, lr=OVERFIT_LR))
