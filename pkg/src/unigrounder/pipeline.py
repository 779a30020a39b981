"""Glue between datasets, inference records, and metric reports."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .inference import InferenceConfig, multiscale_infer, prediction_record
from .metrics import (MetricConfig, Report, Tube, mean_box_iou_in_hits, random_baselines,
                      recall_table, vq2d_metrics)
from .model import GroundingModel
from .synthgen import SyntheticEpisode

DEFAULT_SCALES = {"vq2d": (1,), "nlq": (1, 2), "mq": (1, 2, 4)}


class UnknownVideoError(KeyError):
    pass


def task_inference_config(model: GroundingModel, task: str, base: InferenceConfig | None = None,
                          **overrides) -> InferenceConfig:
    """Per-task defaults: the training window, half-window step, desk scales."""
    w = model.cfg.window[task]
    kw = dict(window=w, step=max(1, w // 2), scales=DEFAULT_SCALES[task])
    if base is not None:
        kw.update(medfilt_kernel=base.medfilt_kernel, peak_thr_vq=base.peak_thr_vq,
                  peak_thr_temporal=base.peak_thr_temporal, max_peaks=base.max_peaks,
                  vq_peak_window=base.vq_peak_window, nms_thr=base.nms_thr,
                  use_foreground_head=base.use_foreground_head,
                  emit_boxes_for_temporal=base.emit_boxes_for_temporal)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return InferenceConfig(**kw)


def predict(model: GroundingModel, episodes: Sequence[SyntheticEpisode], tasks: Sequence[str] = ("vq2d", "nlq", "mq"),
            base: InferenceConfig | None = None, **overrides) -> list:
    """One prediction record per annotation, in dataset order."""
    cfgs = {t: task_inference_config(model, t, base, **overrides) for t in tasks}
    records = []
    for ep in episodes:
        for ann in ep.annotations:
            if ann.task not in cfgs:
                continue
            track = multiscale_infer(model, ep.video, ann.query, ann.task, cfgs[ann.task])
            records.append(prediction_record(ann.id, ep.id, ann.task, track))
    return records


def _gt_tube(ann) -> Tube | None:
    if ann.boxes is None:
        return None
    s, e = ann.segments[0]
    return Tube(s, e, ann.boxes)


def evaluate(records: Sequence[dict], episodes: Sequence[SyntheticEpisode], cfg: MetricConfig | None = None) -> Report:
    cfg = cfg or MetricConfig()
    anns = {a.id: (ep, a) for ep in episodes for a in ep.annotations}
    videos = {ep.id for ep in episodes}
    unknown = sorted({r["video_id"] for r in records if r["video_id"] not in videos})
    if unknown:
        raise UnknownVideoError(f"predictions reference unknown video ids: {', '.join(unknown)}")
    vq_pairs, temporal = [], {"nlq": [], "mq": []}
    zero_shot = []
    for rec in records:
        if rec["id"] not in anns:
            raise UnknownVideoError(f"unknown annotation id {rec['id']}")
        ep, ann = anns[rec["id"]]
        segs = [(s, e) for s, e, _ in rec["segments"]]
        boxes = rec.get("boxes")
        if ann.task == "vq2d":
            gt = _gt_tube(ann)
            if not segs:
                vq_pairs.append((None, 0.0, gt))
                continue
            s, e, score = rec["segments"][0]
            b = boxes[0] if boxes and boxes[0] is not None else np.zeros((e - s + 1, 4))
            vq_pairs.append((Tube(s, e, b), score, gt))
        else:
            temporal[ann.task].append((segs, list(ann.segments)))
            if ann.task == "nlq" and boxes and boxes[0] is not None and ann.boxes is not None:
                s, e, _ = rec["segments"][0]
                zero_shot.append((Tube(s, e, boxes[0]), _gt_tube(ann)))
    out = {}
    if vq_pairs:
        out["vq2d"] = vq2d_metrics(vq_pairs, cfg)
    for task, samples in temporal.items():
        if samples:
            out[task] = recall_table(samples, task, cfg)
    if zero_shot:
        out.setdefault("nlq", {})["box_iou@hit"] = mean_box_iou_in_hits(zero_shot)
    out["counts"] = {"vq2d": len(vq_pairs), "nlq": len(temporal["nlq"]), "mq": len(temporal["mq"])}
    return Report(out)


def gt_set(episodes: Sequence[SyntheticEpisode]) -> dict:
    out: dict = {}
    for ep in episodes:
        for a in ep.annotations:
            out.setdefault(a.task, []).append((ep.length, list(a.segments), _gt_tube(a)))
    return out


def baseline_report(episodes: Sequence[SyntheticEpisode], mode: str, seed: int = 0, repeats: int = 5,
                    cfg: MetricConfig | None = None) -> dict:
    return random_baselines(gt_set(episodes), mode, seed, repeats, cfg)


def random_box_iou_in_hits(records: Sequence[dict], episodes: Sequence[SyntheticEpisode], mode: str,
                           seed: int) -> float:
    """Replace each NLQ top-1 prediction's boxes with random ones and score them."""
    from .metrics import random_boxes

    rng = np.random.default_rng(seed)
    anns = {a.id: a for ep in episodes for a in ep.annotations}
    pairs = []
    for rec in records:
        ann = anns[rec["id"]]
        if ann.task != "nlq" or not rec["segments"] or ann.boxes is None:
            continue
        s, e, _ = rec["segments"][0]
        pairs.append((Tube(s, e, random_boxes(rng, e - s + 1, mode)), _gt_tube(ann)))
    return mean_box_iou_in_hits(pairs)
