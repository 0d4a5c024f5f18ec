"""Training loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..head import downsample_targets, fold_targets
from ..model import FlatteNet, loss_a, loss_b
from ..tensor import Tape, read_flt1, write_flt1
from .metrics import decode_keypoints, miou, pckh
from .tasks import SyntheticTask, gen_task

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_size: int = 8
    path: str = "A"  # A: rearrange then predict; B: predict on folded targets
    eval_size: int = 32
    eval_batch: int = 10_000  # data-stream index reserved for the evaluation set
    train_size: int | None = None  # None: fresh batch every step; else a fixed pool cycled per epoch
    train_batch: int = 20_000  # data-stream index of the fixed training pool
    hflip: bool = False  # mirror each training sample left-right with probability 1/2 (seeded by step)

    def __post_init__(self):
        if self.path not in ("A", "B"):
            raise ValueError(f"path must be 'A' or 'B', got {self.path!r}")
        if self.train_size is not None and (self.train_size < self.batch_size or self.train_size % self.batch_size):
            raise ValueError(f"train_size {self.train_size} must be a positive multiple of batch_size {self.batch_size}")

    @property
    def epoch_steps(self) -> int:
        return self.steps_per_epoch if self.train_size is None else self.train_size // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.epoch_steps


def prepare_targets(task: SyntheticTask, targets, model: FlatteNet, path: str):
    """Targets in the layout each path trains against."""
    if task.kind == "keypoints":
        # heatmaps are rendered at prediction resolution already
        return targets if path == "A" else fold_targets(targets, 1, model.spec.s2)
    if path == "A":
        return downsample_targets(targets[:, None], task.s1, "discrete")[:, 0]
    return fold_targets(targets, task.s1, model.spec.s2, "discrete")


def hflip(images, targets, rng):
    """Mirror a random half of the batch along the width axis (images and targets alike)."""
    flip = rng.random(images.shape[0]) < 0.5
    images, targets = images.copy(), targets.copy()
    images[flip] = images[flip, ..., ::-1]
    targets[flip] = targets[flip, ..., ::-1]
    return images, targets


def loss_kind(task):
    return "mse" if task.kind == "keypoints" else "ce"


def train_step(model, task, optim, images, targets, path="A"):
    tape = Tape()
    optim.zero_grad()
    fn = loss_a if path == "A" else loss_b
    loss = fn(model, images, prepare_targets(task, targets, model, path), loss_kind(task), tape)
    value = float(loss)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {optim.t}")
    tape.backward(loss)
    optim.step()
    return value


def probe_loss(model, task, batches, path="A"):
    """Mean batch-statistics loss over ``batches`` without touching parameters or running stats."""
    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in model.batchnorms()]
    fn = loss_a if path == "A" else loss_b
    try:
        return float(np.mean([
            float(fn(model, images, prepare_targets(task, targets, model, path), loss_kind(task)))
            for images, targets in batches
        ]))
    finally:
        for bn, (mean, var) in zip(model.batchnorms(), saved):
            bn.running_mean[...] = mean
            bn.running_var[...] = var


def evaluate(model: FlatteNet, task: SyntheticTask, images, targets, extra=None, alpha=0.5):
    """Eval-mode loss and task metric (PCKh@alpha in percent, or mIoU)."""
    was_training = [bn.training for bn in model.batchnorms()]
    model.eval()
    try:
        pred = model.forward_a(images)
        if task.kind == "keypoints":
            loss = float(np.mean((pred - targets) ** 2))
            coords = task_coords(decode_keypoints(pred), task)
            metric = pckh(coords, task_coords(extra, task), task.head_length, alpha)
        else:
            small = prepare_targets(task, targets, model, "A")
            z = pred - pred.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = float(-np.take_along_axis(logp, small[:, None], axis=1).mean())
            metric = miou(pred.argmax(axis=1), small, task.num)
    finally:
        for bn, mode in zip(model.batchnorms(), was_training):
            bn.training = mode
    return {"loss": loss, "metric": float(metric)}


def task_coords(hm_coords, task):
    from .tasks import heatmap_to_image

    return heatmap_to_image(hm_coords, task.s1)


def train(model: FlatteNet, task: SyntheticTask, optim, cfg: TrainConfig = TrainConfig(), *,
          history_path=None, checkpoint_dir=None, dtype=None):
    """Train for ``cfg.epochs`` epochs; one history record per epoch.

    Batches come from a fresh seeded stream (index = optimizer step) or,
    with ``cfg.train_size``, from a fixed pool visited in order each epoch.
    The first record (``epoch`` 0) is taken before any update; its ``loss``
    is the batch-statistics loss over the first epoch's batches, so it is
    comparable with the later epoch means.
    """
    dtype = dtype or model.dtype
    ev_images, ev_targets, ev_extra = gen_task(task, cfg.eval_size, batch=cfg.eval_batch, dtype=dtype)
    pool = None
    if cfg.train_size is not None:
        pool = gen_task(task, cfg.train_size, batch=cfg.train_batch, dtype=dtype)[:2]
    steps = cfg.epoch_steps

    def batch_at(t):
        if pool is None:
            images, targets = gen_task(task, cfg.batch_size, batch=t, dtype=dtype)[:2]
        else:
            sl = slice((t % steps) * cfg.batch_size, (t % steps + 1) * cfg.batch_size)
            images, targets = pool[0][sl], pool[1][sl]
        return hflip(images, targets, np.random.default_rng([task.seed, t, 1])) if cfg.hflip else (images, targets)

    history = []

    def record(epoch, loss):
        ev = evaluate(model, task, ev_images, ev_targets, ev_extra)
        rec = {"epoch": epoch, "step": optim.t, "lr": optim.lr, "loss": loss,
               "eval_loss": ev["loss"], "metric": ev["metric"]}
        history.append(rec)
        log.info("epoch %d step %d loss %.6g eval %.6g metric %.4g", epoch, optim.t, loss, ev["loss"], ev["metric"])
        return rec

    model.train()
    record(0, probe_loss(model, task, [batch_at(optim.t + i) for i in range(steps)], cfg.path))
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            images, targets = batch_at(optim.t)
            losses.append(train_step(model, task, optim, images, targets, cfg.path))
        record(epoch, float(np.mean(losses)))
        model.train()

    if history_path is not None:
        write_history(history_path, history)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model.named_state())
    return history


def write_history(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_checkpoint(directory, state: dict[str, np.ndarray]):
    """One FLT1 file per tensor plus ``manifest.json`` mapping names to files and shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (name, value) in enumerate(sorted(state.items())):
        fname = f"{i:04d}.flt1"
        value = np.asarray(value)
        write_flt1(directory / fname, value.reshape((1,) * (4 - value.ndim) + value.shape))
        manifest[name] = {"file": fname, "shape": list(value.shape)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return {name: read_flt1(directory / e["file"]).reshape(e["shape"]) for name, e in manifest.items()}


def restore(model: FlatteNet, state: dict[str, np.ndarray]):
    current = model.named_state()
    missing = set(current) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
    for name, arr in current.items():
        if arr.shape != state[name].shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {arr.shape}")
        arr[...] = state[name]
    return model
