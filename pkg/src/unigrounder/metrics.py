"""Evaluation metrics for tubes and ranked segments, plus random baselines.

Segments are inclusive frame ranges ``[s, e]``; boxes are relative
``(cx, cy, w, h)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class MetricContractError(ValueError):
    pass


@dataclass
class Tube:
    start: int
    end: int
    boxes: np.ndarray  # [(end - start + 1), 4]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) != self.end - self.start + 1:
            raise MetricContractError(f"tube [{self.start}, {self.end}] has {len(self.boxes)} boxes")

    def box_at(self, t: int):
        if self.start <= t <= self.end:
            return self.boxes[t - self.start]
        return None

    @property
    def segment(self) -> tuple:
        return self.start, self.end


@dataclass
class MetricConfig:
    tap_tiou: float = 0.25
    recall_tious: tuple = (0.3, 0.5)
    recovery_box_iou: float = 0.5
    success_iou: float = 0.05
    ks: tuple = (1, 5)


def temporal_iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def box_area(b) -> float:
    return max(b[2], 0.0) * max(b[3], 0.0)


def box_intersection(a, b) -> float:
    iw = min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2)
    ih = min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2)
    return max(iw, 0.0) * max(ih, 0.0)


def box_iou(a, b) -> float:
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def st_tube_iou(pred: Tube, gt: Tube) -> float:
    """Summed per-frame box intersections over summed unions on the temporal union."""
    inter = union = 0.0
    for t in range(min(pred.start, gt.start), max(pred.end, gt.end) + 1):
        pb, gb = pred.box_at(t), gt.box_at(t)
        if pb is not None and gb is not None:
            i = box_intersection(pb, gb)
            inter += i
            union += box_area(pb) + box_area(gb) - i
        elif pb is not None:
            union += box_area(pb)
        elif gb is not None:
            union += box_area(gb)
    return inter / union if union > 0 else 0.0


def _ranked(samples):
    pooled = []
    for si, (preds, _) in enumerate(samples):
        for ri, p in enumerate(preds):
            if not isinstance(p, (tuple, list)) or len(p) != 2 or p[1] is None:
                raise MetricContractError(f"sample {si} prediction {ri} has no confidence")
            pooled.append((-float(p[1]), si, ri, p[0]))
    pooled.sort(key=lambda x: x[:3])
    return pooled


def match_ranked(samples, iou_fn: Callable, thr: float) -> list:
    """Greedy one-to-one matching in global confidence order; returns TP flags."""
    used = [np.zeros(len(gts), dtype=bool) for _, gts in samples]
    flags = []
    for _, si, _, pred in _ranked(samples):
        gts = samples[si][1]
        best, best_iou = -1, thr
        for gi, gt in enumerate(gts):
            if used[si][gi]:
                continue
            iou = iou_fn(pred, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        if best >= 0:
            used[si][best] = True
        flags.append(best >= 0)
    return flags


def average_precision(samples: Sequence, iou_fn: Callable = temporal_iou, thr: float = 0.25) -> float:
    """All-point interpolated AP over pooled predictions.

    ``samples``: list of ``(predictions, gts)`` where predictions are
    ``(item, score)`` pairs. Recall is relative to the total GT count.
    """
    n_gt = sum(len(g) for _, g in samples)
    flags = np.asarray(match_ranked(samples, iou_fn, thr), dtype=float)
    if n_gt == 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    # precision envelope, then area under the staircase
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * env))


def recovery(pred: Tube, gt: Tube, thr: float = 0.5) -> float:
    """% of predicted-tube frames whose box reaches IoU ``thr`` with the GT box."""
    n = pred.end - pred.start + 1
    if n <= 0:
        return 0.0
    hits = 0
    for t in range(pred.start, pred.end + 1):
        gb = gt.box_at(t)
        if gb is not None and box_iou(pred.box_at(t), gb) >= thr:
            hits += 1
    return 100.0 * hits / n


def success(pred: Tube, gt: Tube, thr: float = 0.05) -> bool:
    return st_tube_iou(pred, gt) >= thr


def recall_at_k(samples: Sequence, k: int, m: float, mode: str = "nlq") -> float:
    """Percentage recall of top-``k`` ranked segments at tIoU >= ``m``.

    ``nlq`` mode counts samples (one GT each, any GT hit counts); ``mq``
    mode counts GT instances.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = total = 0
    for preds, gts in samples:
        top = list(preds)[:k]
        if mode == "nlq":
            total += 1
            hits += any(temporal_iou(p, g) >= m for p in top for g in gts)
        else:
            for g in gts:
                total += 1
                hits += any(temporal_iou(p, g) >= m for p in top)
    return 100.0 * hits / total if total else 0.0


# ---------------------------------------------------------------- reports

@dataclass
class Report:
    values: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1)

    def table(self) -> str:
        rows = []
        for task, metrics in self.values.items():
            if not isinstance(metrics, dict):
                continue
            for name, val in metrics.items():
                if isinstance(val, (int, float)):
                    rows.append((task, name, f"{val:.4f}"))
        w0 = max((len(r[0]) for r in rows), default=4)
        w1 = max((len(r[1]) for r in rows), default=6)
        lines = [f"{'task':<{w0}}  {'metric':<{w1}}  value"]
        lines += [f"{a:<{w0}}  {b:<{w1}}  {c:>8s}" for a, b, c in rows]
        return "\n".join(lines)


def vq2d_metrics(pairs: Sequence, cfg: MetricConfig | None = None) -> dict:
    """``pairs``: list of ``(pred_tube, score, gt_tube)``; pred may be None."""
    cfg = cfg or MetricConfig()
    t_samples, st_samples = [], []
    rec, succ = [], []
    for pred, score, gt in pairs:
        if pred is None:
            t_samples.append(([], [gt.segment]))
            st_samples.append(([], [gt]))
            rec.append(0.0)
            succ.append(False)
            continue
        t_samples.append(([(pred.segment, score)], [gt.segment]))
        st_samples.append(([(pred, score)], [gt]))
        rec.append(recovery(pred, gt, cfg.recovery_box_iou))
        succ.append(success(pred, gt, cfg.success_iou))
    return {
        "tAP25": average_precision(t_samples, temporal_iou, cfg.tap_tiou),
        "stAP25": average_precision(st_samples, st_tube_iou, cfg.tap_tiou),
        "rec%": float(np.mean(rec)) if rec else 0.0,
        "Succ": 100.0 * float(np.mean(succ)) if succ else 0.0,
    }


def recall_table(samples: Sequence, mode: str, cfg: MetricConfig | None = None) -> dict:
    cfg = cfg or MetricConfig()
    return {f"r@{k}/tIoU{m}": recall_at_k(samples, k, m, mode) for m in cfg.recall_tious for k in cfg.ks}


# ---------------------------------------------------------------- random baselines

def random_boxes(rng, n: int, mode: str) -> np.ndarray:
    """``random_boxes``: uniform corners; ``random_centered``: centred, jittered size."""
    if mode == "random_boxes":
        c = rng.uniform(0, 1, size=(n, 2, 2))
        lo, hi = c.min(axis=1), c.max(axis=1)
        return np.concatenate([(lo + hi) / 2, np.maximum(hi - lo, 1e-3)], axis=1)
    if mode == "random_centered":
        size = rng.uniform(0.1, 0.9, size=(n, 2))
        return np.concatenate([np.full((n, 2), 0.5), size], axis=1)
    raise ValueError(f"unknown baseline mode {mode!r}")


def random_segment(rng, length: int, lengths: Sequence[int]):
    n = int(min(rng.choice(lengths), length))
    s = int(rng.integers(0, length - n + 1))
    return s, s + n - 1


def random_baselines(gt_set: dict, mode: str, seed: int = 0, repeats: int = 5,
                     cfg: MetricConfig | None = None) -> dict:
    """Score random predictions through the regular metric pipeline.

    ``gt_set`` maps task -> list of ``(video_length, gt_segments, gt_tube_or_None)``.
    Temporal extents are random segments whose lengths are drawn from the
    GT length pool of that task; boxes follow ``mode``. Returns the mean
    over ``repeats`` seeds and the per-seed tables.
    """
    cfg = cfg or MetricConfig()
    per_seed = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        table = {}
        for task, items in gt_set.items():
            lengths = [e - s + 1 for _, segs, _ in items for s, e in segs]
            if task == "vq2d":
                pairs = []
                for length, segs, tube in items:
                    s, e = random_segment(rng, length, lengths)
                    pred = Tube(s, e, random_boxes(rng, e - s + 1, mode))
                    pairs.append((pred, float(rng.uniform()), tube))
                table[task] = vq2d_metrics(pairs, cfg)
            else:
                samples = []
                for length, segs, _ in items:
                    k = max(cfg.ks)
                    samples.append(([random_segment(rng, length, lengths) for _ in range(k)], list(segs)))
                table[task] = recall_table(samples, task, cfg)
        per_seed.append(table)
    mean = {task: {m: float(np.mean([t[task][m] for t in per_seed])) for m in per_seed[0][task]}
            for task in per_seed[0]} if per_seed else {}
    return {"mean": mean, "per_seed": per_seed}


def mean_box_iou_in_hits(pairs: Sequence, m: float = 0.3) -> float:
    """Mean per-frame box IoU over frames shared by correctly retrieved segments.

    ``pairs``: ``(pred_tube, gt_tube)`` for each sample's top-1 prediction.
    """
    ious = []
    for pred, gt in pairs:
        if pred is None or temporal_iou(pred.segment, gt.segment) < m:
            continue
        for t in range(max(pred.start, gt.start), min(pred.end, gt.end) + 1):
            ious.append(box_iou(pred.box_at(t), gt.box_at(t)))
    return float(np.mean(ious)) if ious else 0.0
