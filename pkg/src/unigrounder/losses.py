"""Training objectives: box regression (L1 + gIoU) and the temporal terms.

Functions take per-sample arrays; most also accept a leading batch axis
and then average over it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensors as tt
from .tensors import ContractError, Tensor

BCE_CLAMP = 1e-6
ATT_EPS = 1e-8


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    kl: float = 10.0
    att: float = 1.0
    fg: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class WindowTargets:
    s: int
    e: int
    p_s: np.ndarray
    p_e: np.ndarray
    fg: np.ndarray
    boxes: np.ndarray | None = None

    @property
    def w(self) -> int:
        return len(self.fg)


def gaussian_target(center: int, w: int) -> np.ndarray:
    """Unit-variance normal density at integer offsets, renormalized to sum 1."""
    if not 0 <= center < w:
        raise ValueError(f"center {center} outside window of length {w}")
    t = np.arange(w) - center
    dens = np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    return dens / dens.sum()


def make_targets(s: int, e: int, w: int, boxes: np.ndarray | None = None) -> WindowTargets:
    """Targets for a window of length ``w``; ``s``/``e`` are clipped into it.

    ``boxes`` (if given) hold one row per frame of the *unclipped* segment
    and are trimmed alongside.
    """
    cs, ce = max(s, 0), min(e, w - 1)
    if cs > ce:
        raise ValueError(f"segment [{s}, {e}] does not intersect window of length {w}")
    fg = np.zeros(w)
    fg[cs:ce + 1] = 1.0
    if boxes is not None:
        boxes = np.asarray(boxes, dtype=np.float64)[cs - s: ce - s + 1]
    return WindowTargets(cs, ce, gaussian_target(cs, w), gaussian_target(ce, w), fg, boxes)


def box_corners(b: Tensor):
    cx, cy, bw, bh = (b[..., i] for i in range(4))
    return cx - bw * 0.5, cy - bh * 0.5, cx + bw * 0.5, cy + bh * 0.5


def l1_box_loss(pred: Tensor, target) -> Tensor:
    """Mean over boxes of the summed absolute coordinate error."""
    target = tt.as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"l1_box_loss: shapes {pred.shape} and {target.shape} differ")
    return tt.mean(tt.sum_(tt.abs_(pred - target), axis=-1))


def giou(pred: Tensor, target) -> Tensor:
    """Per-box generalized IoU for ``(cx, cy, w, h)`` boxes."""
    target = tt.as_tensor(target, pred.dtype)
    px0, py0, px1, py1 = box_corners(pred)
    gx0, gy0, gx1, gy1 = box_corners(target)
    area_p = tt.relu(px1 - px0) * tt.relu(py1 - py0)
    area_g = tt.relu(gx1 - gx0) * tt.relu(gy1 - gy0)
    iw = tt.relu(tt.minimum(px1, gx1) - tt.maximum(px0, gx0))
    ih = tt.relu(tt.minimum(py1, gy1) - tt.maximum(py0, gy0))
    inter = iw * ih
    union = area_p + area_g - inter
    cw = tt.maximum(px1, gx1) - tt.minimum(px0, gx0)
    ch = tt.maximum(py1, gy1) - tt.minimum(py0, gy0)
    hull = cw * ch
    iou = inter / tt.maximum(union, 1e-12)
    return iou - (hull - union) / tt.maximum(hull, 1e-12)


def giou_loss(pred: Tensor, target) -> Tensor:
    return tt.mean(1.0 - giou(pred, target))


def kl_loss(logits: Tensor, target) -> Tensor:
    """KL(target || softmax(logits)) along the last axis, 0*log0 = 0; batch-averaged."""
    p = np.asarray(target, dtype=logits.dtype)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    cross = tt.sum_(tt.log_softmax(logits, axis=-1) * p, axis=-1)
    return tt.mean(Tensor(plogp.astype(logits.dtype)) - cross)


def positive_weight(fg: np.ndarray) -> np.ndarray:
    """Negatives/positives per window, clamped to [1, 100]; 1 if no positives."""
    fg = np.asarray(fg)
    pos = fg.sum(axis=-1)
    neg = fg.shape[-1] - pos
    alpha = np.where(pos > 0, neg / np.maximum(pos, 1), 1.0)
    return np.clip(alpha, 1.0, 100.0)


def foreground_bce(scores: Tensor, target) -> Tensor:
    """Positive-weighted binary cross-entropy, averaged over frames (and batch)."""
    f = np.asarray(target, dtype=scores.dtype)
    alpha = positive_weight(f)[..., None].astype(scores.dtype)
    s = tt.clamp(scores, BCE_CLAMP, 1 - BCE_CLAMP)
    ll = tt.log(s) * (alpha * f) + tt.log(1.0 - s) * (1.0 - f)
    return -tt.mean(ll)


def segment_mask(s, e, t: int) -> np.ndarray:
    """``[..., T]`` boolean of columns inside ``[s, e]`` per batch row."""
    s = np.atleast_1d(s)
    e = np.atleast_1d(e)
    cols = np.arange(t)
    return (cols >= s[:, None]) & (cols <= e[:, None])


def guided_attention_loss(maps: Tensor, s, e) -> Tensor:
    """-mean_t log(in-segment mass of the layer/head-averaged temporal attention).

    ``maps``: ``[N_d, heads, T, T]`` or batched ``[B, N_d, heads, T, T]``.
    """
    batched = maps.ndim == 5
    if not batched:
        maps = tt.reshape(maps, (1,) + maps.shape)
    t = maps.shape[-1]
    avg = tt.mean(maps, axis=(1, 2))  # [B, T, T]
    cols = segment_mask(s, e, t).astype(maps.dtype)[:, None, :]
    mass = tt.sum_(avg * cols, axis=-1)  # [B, T]
    return -tt.mean(tt.log(mass + ATT_EPS))


TERMS = ("kl_s", "kl_e", "bce", "att", "l1", "giou")


def task_loss(task: str, preds, maps: Tensor, targets, weights: LossWeights | None = None):
    """Weighted loss for one task over a (batched) window; returns (total, breakdown).

    ``targets`` is a ``WindowTargets`` or a list of them matching the batch.
    The breakdown holds each weighted term as a float; spatial terms are 0
    for temporal-only tasks.
    """
    weights = weights or LossWeights()
    if isinstance(targets, WindowTargets):
        targets = [targets]
    starts = preds.start_logits
    if starts.ndim == 1:
        preds = type(preds)(*(tt.reshape(x, (1,) + x.shape) for x in
                              (preds.boxes, preds.start_logits, preds.end_logits, preds.foreground)))
        maps = tt.reshape(maps, (1,) + maps.shape)
    p_s = np.stack([tg.p_s for tg in targets])
    p_e = np.stack([tg.p_e for tg in targets])
    fg = np.stack([tg.fg for tg in targets])
    s = np.array([tg.s for tg in targets])
    e = np.array([tg.e for tg in targets])
    terms = {
        "kl_s": kl_loss(preds.start_logits, p_s) * weights.kl,
        "kl_e": kl_loss(preds.end_logits, p_e) * weights.kl,
        "bce": foreground_bce(preds.foreground, fg) * weights.fg,
        "att": guided_attention_loss(maps, s, e) * weights.att,
    }
    if task == "vq2d":
        if any(tg.boxes is None for tg in targets):
            raise ContractError("vq2d targets require boxes")
        w = preds.boxes.shape[1]
        rows = np.concatenate([b * w + np.arange(tg.s, tg.e + 1) for b, tg in enumerate(targets)])
        flat = tt.reshape(preds.boxes, (-1, 4))
        pb = tt.take(flat, rows, axis=0)
        gb = np.concatenate([tg.boxes for tg in targets])
        terms["l1"] = l1_box_loss(pb, gb) * weights.l1
        terms["giou"] = giou_loss(pb, gb) * weights.giou
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    breakdown = {k: (float(terms[k].data) if k in terms else 0.0) for k in TERMS}
    breakdown["total"] = float(total.data)
    return total, breakdown


def breakdown_line(task: str, breakdown: dict, **extra) -> str:
    """One JSON line with the logged keys in a fixed order."""
    rec = {"task": task, "total": breakdown["total"]}
    rec.update({k: breakdown[k] for k in TERMS})
    rec.update(extra)
    return json.dumps(rec)
