"""Window sampling, multi-task batch scheduling, AdamW, and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensors as tt
from .losses import LossWeights, breakdown_line, make_targets, task_loss
from .model import TASKS, GroundingModel, save_checkpoint
from .synthgen import Annotation, SyntheticEpisode

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_backbone: float = 1e-3
    lr_text: float = 1e-3
    lr_rest: float = 1e-3
    lr_drop_every: int = 10
    lr_drop_factor: float = 10.0
    weight_decay: float = 0.01
    seed: int = 0
    tasks: tuple = TASKS
    sampling: str = "round_robin"
    task_stride: dict = field(default_factory=lambda: {"vq2d": 1, "nlq": 2, "mq": 2})

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise TrainConfigError("tasks must be non-empty")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise TrainConfigError(f"unknown tasks {bad}")
        if min(self.lr_backbone, self.lr_text, self.lr_rest) <= 0:
            raise TrainConfigError("learning rates must be positive")
        if self.sampling not in ("round_robin", "concat"):
            raise TrainConfigError(f"unknown sampling mode {self.sampling!r}")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(epochs=25, batch_size=16, lr_backbone=1e-5, lr_text=5e-5, lr_rest=5e-5,
                   task_stride={"vq2d": 1, "nlq": 5, "mq": 5})

    def lr(self, group: str, epoch: int) -> float:
        base = {"backbone": self.lr_backbone, "text": self.lr_text, "rest": self.lr_rest}[group]
        return base / self.lr_drop_factor ** (epoch // self.lr_drop_every)


# ---------------------------------------------------------------- sampling

def sample_training_window(segments: Sequence, w: int, t: int, rng) -> tuple:
    """Pick one GT segment and a length-``w`` window containing (part of) it.

    Returns inclusive ``(win_start, win_end)``.
    """
    if w > t:
        raise TrainConfigError(f"window {w} longer than video {t}")
    s, e = segments[int(rng.integers(len(segments)))]
    if e - s + 1 <= w:
        lo, hi = max(0, e - w + 1), min(s, t - w)
    else:
        lo, hi = max(0, s - w + 1), min(e, t - w)
    start = int(rng.integers(lo, hi + 1))
    return start, start + w - 1


@dataclass
class Sample:
    task: str
    episode: SyntheticEpisode
    ann: Annotation


def _cycle(items: list, rng) -> Iterator:
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def round_robin_stream(datasets: dict, batch_size: int, mode: str, rng,
                       batches_per_epoch: int | None = None) -> Iterator[list]:
    """Yield lists of samples.

    ``round_robin`` cycles the tasks in insertion order, each batch drawn
    from one task's own reshuffling iterator. ``concat`` shuffles the union
    once per epoch and cuts it into (possibly mixed) batches.
    """
    for name, items in datasets.items():
        if not items:
            raise TrainConfigError(f"dataset for {name!r} is empty")
    total = sum(len(v) for v in datasets.values())
    n_batches = batches_per_epoch or math.ceil(total / batch_size)
    if mode == "round_robin":
        iters = {name: _cycle(items, rng) for name, items in datasets.items()}
        names = list(datasets)
        b = 0
        while True:
            name = names[b % len(names)]
            yield [next(iters[name]) for _ in range(batch_size)]
            b += 1
    elif mode == "concat":
        union = [x for items in datasets.values() for x in items]
        while True:
            order = rng.permutation(len(union))
            for i in range(n_batches):
                chunk = order[i * batch_size:(i + 1) * batch_size]
                if len(chunk):
                    yield [union[j] for j in chunk]
    else:
        raise TrainConfigError(f"unknown sampling mode {mode!r}")


# ---------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay and named parameter groups."""

    def __init__(self, named_params: Sequence[tuple], group_of, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.01):
        self.named = list(named_params)
        self.group = {name: group_of(name) for name, _ in self.named}
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lrs: dict):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (name, p), g in zip(self.named, grads):
            lr = lrs[self.group[name]]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t}


# ---------------------------------------------------------------- batching

def build_datasets(episodes: Sequence[SyntheticEpisode], tasks: Sequence[str]) -> dict:
    out = {t: [] for t in tasks}
    for ep in episodes:
        for ann in ep.annotations:
            if ann.task in out:
                out[ann.task].append(Sample(ann.task, ep, ann))
    return out


def subsample_segment(s: int, e: int, r: int) -> tuple:
    return s // r, e // r


def prepare_window(sample: Sample, w: int, stride: int, rng):
    """Frames, targets, and query for one sample's training window."""
    video = sample.episode.video[::stride]
    t = len(video)
    segs = [subsample_segment(s, e, stride) for s, e in sample.ann.segments]
    pick = int(rng.integers(len(segs)))
    a, b = sample_training_window([segs[pick]], w, t, rng)
    s, e = segs[pick]
    boxes = None
    if sample.task == "vq2d":
        gs, _ = sample.ann.segments[pick]
        full = np.asarray(sample.ann.boxes)
        # box of subsampled frame k comes from original frame k * stride
        boxes = full[np.arange(s, e + 1) * stride - gs]
    tgt = make_targets(s - a, e - a, w, boxes)
    return video[a:b + 1], tgt


def batch_loss(model: GroundingModel, batch: Sequence[Sample], cfg: TrainConfig, weights: LossWeights, rng):
    """Sum over tasks of the per-task mean loss; returns (loss, [(task, breakdown)])."""
    by_task: dict = {}
    for smp in batch:
        by_task.setdefault(smp.task, []).append(smp)
    total = None
    logs = []
    for task, items in by_task.items():
        stride = cfg.task_stride.get(task, 1)
        w = min(model.cfg.window[task], min(len(s.episode.video[::stride]) for s in items))
        frames, targets = [], []
        for smp in items:
            f, tg = prepare_window(smp, w, stride, rng)
            frames.append(f)
            targets.append(tg)
        preds, maps = model.forward(np.stack(frames), [s.ann.query for s in items])
        loss, br = task_loss(task, preds, maps, targets, weights)
        total = loss if total is None else total + loss
        logs.append((task, br))
    return total, logs


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    epoch_means: list
    log_lines: list
    checkpoint: Path | None


def train(model: GroundingModel, episodes: Sequence[SyntheticEpisode], cfg: TrainConfig,
          out_dir=None, weights: LossWeights | None = None, max_steps: int | None = None,
          log_fh=None) -> TrainResult:
    """Train ``model`` in place.

    Writes ``checkpoint.{json,bin}`` to ``out_dir`` after each epoch and a
    JSON-lines loss log (``train_log.jsonl``). A non-finite loss aborts
    with the offending batch dumped to ``nan_batch.npz``.
    """
    weights = weights or LossWeights()
    rng = np.random.default_rng(cfg.seed)
    datasets = build_datasets(episodes, cfg.tasks)
    for task, items in datasets.items():
        if not items:
            raise TrainConfigError(f"no training samples for task {task!r}")
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = AdamW(named, GroundingModel.group_of, weight_decay=cfg.weight_decay)
    n_total = sum(len(v) for v in datasets.values())
    per_epoch = math.ceil(n_total / cfg.batch_size)
    stream = round_robin_stream(datasets, cfg.batch_size, cfg.sampling, rng, per_epoch)
    out_dir = Path(out_dir) if out_dir is not None else None
    own_fh = False
    if log_fh is None and out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
        own_fh = True
    lines, epoch_means = [], []
    step = 0
    ckpt = None
    try:
        for epoch in range(cfg.epochs):
            lrs = {g: cfg.lr(g, epoch) for g in ("backbone", "text", "rest")}
            totals = []
            for _ in range(per_epoch):
                batch = next(stream)
                with tt.Tape() as tape:
                    try:
                        loss, logs = batch_loss(model, batch, cfg, weights, rng)
                    except tt.NonFiniteError as exc:
                        _dump_batch(out_dir, batch, step)
                        raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
                    if not np.isfinite(loss.data):
                        _dump_batch(out_dir, batch, step)
                        raise TrainingDiverged(f"non-finite loss at step {step}")
                    grads = tt.grad(loss, params, tape)
                opt.step(grads, lrs)
                totals.append(float(loss.data))
                for task, br in logs:
                    line = breakdown_line(task, br, step=step, epoch=epoch)
                    lines.append(line)
                    if log_fh is not None:
                        log_fh.write(line + "\n")
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            epoch_means.append(float(np.mean(totals)))
            log.info("epoch %d mean loss %.4f", epoch, epoch_means[-1])
            if out_dir is not None:
                ckpt = out_dir / "checkpoint"
                save_checkpoint(model, ckpt, extra={"epoch": epoch, "tasks": list(cfg.tasks)})
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if own_fh:
            log_fh.close()
    return TrainResult(epoch_means, lines, ckpt)


def _dump_batch(out_dir, batch, step):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / "nan_batch.npz", step=step, ids=np.array([s.ann.id for s in batch]))
    log.error("dumped offending batch at step %d to %s", step, out_dir / "nan_batch.npz")
