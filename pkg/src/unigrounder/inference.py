"""Long-video inference: sliding windows, peak decoding, multi-scale pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import FramePredictions, GroundingModel, Query
from .metrics import Tube, temporal_iou


class InferenceConfigError(ValueError):
    pass


@dataclass
class InferenceConfig:
    window: int = 32
    step: int = 16
    medfilt_kernel: int = 5
    peak_thr_vq: float = 0.5
    peak_thr_temporal: float = 0.1
    max_peaks: int = 1000
    vq_peak_window: int = 16
    scales: tuple = (1,)
    nms_thr: float = 0.4
    use_foreground_head: bool = True
    emit_boxes_for_temporal: bool = False
    batch_windows: int = 16

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not 1 <= self.step <= self.window:
            raise InferenceConfigError(f"step must lie in [1, window]; got {self.step}")
        if self.medfilt_kernel % 2 == 0:
            raise InferenceConfigError("median filter kernel must be odd")
        for name in ("peak_thr_vq", "peak_thr_temporal", "nms_thr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InferenceConfigError(f"{name} must lie in [0, 1]")
        if not self.scales or min(self.scales) < 1:
            raise InferenceConfigError("scales must be a non-empty list of strides >= 1")

    @classmethod
    def full_scale(cls, task: str) -> "InferenceConfig":
        """Values used at full scale (frame counts at 5 fps)."""
        scales = {"vq2d": (1,), "nlq": (1, 5), "mq": (1, 3, 5, 10, 25)}[task]
        w = 200 if task == "vq2d" else 400
        return cls(window=w, step=w // 2, vq_peak_window=70, scales=scales)


@dataclass
class Candidate:
    start: int
    end: int
    score: float
    boxes: np.ndarray | None = None

    @property
    def segment(self) -> tuple:
        return self.start, self.end


@dataclass
class ResponseTrack:
    """Either a single tube (``kind == "tube"``) or ranked segments."""

    kind: str
    candidates: list = field(default_factory=list)

    @property
    def tube(self) -> Tube | None:
        if self.kind != "tube" or not self.candidates:
            return None
        c = self.candidates[0]
        return Tube(c.start, c.end, c.boxes)

    @property
    def score(self) -> float:
        return self.candidates[0].score if self.candidates else 0.0


# ---------------------------------------------------------------- windows

def slide_windows(t: int, w: int, step: int) -> list:
    """``[start, end)`` windows; the last one is clamped to end at ``t``."""
    if w >= t:
        return [(0, t)]
    starts = list(range(0, t - w + 1, step))
    if starts[-1] + w < t:
        starts.append(t - w)
    return [(s, s + w) for s in starts]


def accumulate(model: GroundingModel, video: np.ndarray, query: Query, cfg: InferenceConfig) -> FramePredictions:
    """Run every window and average all 7 channels over covering windows."""
    t = len(video)
    wins = slide_windows(t, cfg.window, cfg.step)
    total = np.zeros((t, 7))
    count = np.zeros(t)
    for i in range(0, len(wins), cfg.batch_windows):
        chunk = wins[i:i + cfg.batch_windows]
        frames = np.stack([video[a:b] for a, b in chunk])
        preds, _ = model.forward(frames, [query] * len(chunk))
        stacked = preds.stacked()
        for (a, b), row in zip(chunk, stacked):
            total[a:b] += row
            count[a:b] += 1
    return FramePredictions.from_stacked(total / count[:, None])


def accumulate_windows(window_preds: Sequence[np.ndarray], wins: Sequence[tuple], t: int) -> FramePredictions:
    """Average precomputed ``[w, 7]`` window outputs onto a length-``t`` timeline."""
    total = np.zeros((t, 7))
    count = np.zeros(t)
    for (a, b), row in zip(wins, window_preds):
        total[a:b] += row
        count[a:b] += 1
    if np.any(count == 0):
        raise ValueError("windows do not cover every frame")
    return FramePredictions.from_stacked(total / count[:, None])


# ---------------------------------------------------------------- scores -> peaks

def median_filter(scores, kernel: int = 5) -> np.ndarray:
    """Centered running median with zero padding at both ends."""
    if kernel % 2 == 0:
        raise InferenceConfigError("median filter kernel must be odd")
    x = np.asarray(scores, dtype=np.float64)
    half = kernel // 2
    padded = np.pad(x, half)
    view = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return np.median(view, axis=1)


def find_peaks(scores, thr: float, max_peaks: int = 1000) -> list:
    """One ``(index, score)`` per contiguous run above ``thr``, at the run maximum."""
    x = np.asarray(scores, dtype=np.float64)
    above = x > thr
    peaks = []
    t = 0
    while t < len(x):
        if not above[t]:
            t += 1
            continue
        u = t
        while u < len(x) and above[u]:
            u += 1
        i = t + int(np.argmax(x[t:u]))
        peaks.append((i, float(x[i])))
        t = u
    if len(peaks) > max_peaks:
        keep = sorted(range(len(peaks)), key=lambda j: (-peaks[j][1], peaks[j][0]))[:max_peaks]
        peaks = [peaks[j] for j in sorted(keep)]
    return peaks


def _masked_softmax(logits: np.ndarray, lo: int, hi: int) -> np.ndarray:
    p = np.zeros(len(logits))
    z = logits[lo:hi + 1] - np.max(logits[lo:hi + 1])
    e = np.exp(z)
    p[lo:hi + 1] = e / e.sum()
    return p


def span_bounds(peak: int, span: int, t: int) -> tuple:
    """Inclusive bounds of a ``span``-frame window centred on ``peak``, kept inside [0, t)."""
    span = min(span, t)
    lo = peak - span // 2
    lo = min(max(lo, 0), t - span)
    return lo, lo + span - 1


def best_pair(p_s: np.ndarray, p_e: np.ndarray, lo: int, hi: int) -> tuple:
    """argmax of ``p_s[i] * p_e[j]`` over ``lo <= i <= j <= hi`` (first in row-major order)."""
    joint = np.triu(np.outer(p_s[lo:hi + 1], p_e[lo:hi + 1]))
    i, j = np.unravel_index(int(np.argmax(joint)), joint.shape)
    return lo + int(i), lo + int(j), float(joint[i, j])


def decode_segment_at_peak(preds: FramePredictions, peak: int, span: int, score: float | None = None) -> Candidate:
    p = preds.numpy()
    t = len(p.start_logits)
    lo, hi = span_bounds(peak, span, t)
    p_s = _masked_softmax(np.asarray(p.start_logits, dtype=np.float64), lo, hi)
    p_e = _masked_softmax(np.asarray(p.end_logits, dtype=np.float64), lo, hi)
    s, e, _ = best_pair(p_s, p_e, lo, hi)
    sc = float(p.foreground[peak]) if score is None else score
    return Candidate(s, e, sc, np.asarray(p.boxes[s:e + 1], dtype=np.float64))


def infer_vq2d(preds: FramePredictions, cfg: InferenceConfig) -> ResponseTrack:
    p = preds.numpy()
    t = len(p.foreground)
    if not cfg.use_foreground_head:
        s, e, joint = best_pair(_masked_softmax(np.asarray(p.start_logits, float), 0, t - 1),
                                _masked_softmax(np.asarray(p.end_logits, float), 0, t - 1), 0, t - 1)
        return ResponseTrack("tube", [Candidate(s, e, joint, np.asarray(p.boxes[s:e + 1], float))])
    filt = median_filter(p.foreground, cfg.medfilt_kernel)
    peaks = find_peaks(filt, cfg.peak_thr_vq, cfg.max_peaks)
    if peaks:
        idx, score = peaks[-1]
    else:
        idx = int(np.argmax(filt))
        score = float(filt[idx])
    return ResponseTrack("tube", [decode_segment_at_peak(p, idx, cfg.vq_peak_window, score)])


def infer_temporal(preds: FramePredictions, cfg: InferenceConfig) -> ResponseTrack:
    p = preds.numpy()
    filt = median_filter(p.foreground, cfg.medfilt_kernel)
    peaks = find_peaks(filt, cfg.peak_thr_temporal, cfg.max_peaks)
    cands = []
    for idx, score in peaks:
        c = decode_segment_at_peak(p, idx, cfg.window, score)
        if not cfg.emit_boxes_for_temporal:
            c.boxes = None
        cands.append(c)
    cands.sort(key=lambda c: (-c.score, c.start, c.end))
    return ResponseTrack("segments", cands)


def temporal_nms(cands: Sequence[Candidate], thr: float = 0.4) -> list:
    """Greedy suppression of candidates overlapping a kept one with tIoU > ``thr``."""
    order = sorted(cands, key=lambda c: (-c.score, c.start, c.end))
    kept: list = []
    for c in order:
        if all(temporal_iou(c.segment, k.segment) <= thr for k in kept):
            kept.append(c)
    return kept


def remap_candidate(c: Candidate, stride: int, t: int) -> Candidate:
    """Map a candidate found on frames ``{0, r, 2r, ...}`` back to original indices."""
    s = stride * c.start
    e = min(stride * c.end + stride - 1, t - 1)
    boxes = None
    if c.boxes is not None:
        boxes = np.repeat(np.asarray(c.boxes), stride, axis=0)[: e - s + 1]
    return Candidate(s, e, c.score, boxes)


def decode(task: str, preds: FramePredictions, cfg: InferenceConfig) -> ResponseTrack:
    return infer_vq2d(preds, cfg) if task == "vq2d" else infer_temporal(preds, cfg)


def multiscale_infer(model: GroundingModel, video: np.ndarray, query: Query, task: str,
                     cfg: InferenceConfig) -> ResponseTrack:
    """Decode at each temporal stride, remap, pool, suppress, re-rank.

    A lone stride-1 scale is exactly the single-scale path.
    """
    t = len(video)
    if cfg.scales == (1,):
        return decode(task, accumulate(model, video, query, cfg), cfg)
    pooled = []
    for r in cfg.scales:
        sub = video[::r]
        track = decode(task, accumulate(model, sub, query, cfg), cfg)
        pooled.extend(remap_candidate(c, r, t) for c in track.candidates)
    if task == "vq2d":
        best = max(pooled, key=lambda c: (c.score, c.end)) if pooled else None
        return ResponseTrack("tube", [best] if best else [])
    return ResponseTrack("segments", temporal_nms(pooled, cfg.nms_thr))


# ---------------------------------------------------------------- output records

def prediction_record(ann_id: str, video_id: str, task: str, track: ResponseTrack) -> dict:
    segs = [[int(c.start), int(c.end), float(c.score)] for c in track.candidates]
    rec = {"id": ann_id, "video_id": video_id, "task": task, "segments": segs}
    boxes = [c.boxes.tolist() if c.boxes is not None else None for c in track.candidates]
    if any(b is not None for b in boxes):
        rec["boxes"] = boxes
    return rec


def write_predictions(records: Sequence[dict], path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
