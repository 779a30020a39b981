"""Seeded synthetic episodes: noisy feature-grid videos with planted moving patterns.

Each episode plants a handful of concepts along linear box trajectories and
emits one annotation per task:

* ``vq2d``: a re-rendered crop of a concept; answer is its most recent
  occurrence before the last frame, with per-frame boxes.
* ``nlq``: a token question naming a concept that occurs exactly once.
* ``mq``: a concept with 1-4 instances; the answer is all of them.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .model import Query

FORMAT_VERSION = 1
TENSOR_MAGIC = b"UGT1"

PAD = 0
WORDS = {"where": 1, "is": 2, "the": 3, "did": 4, "i": 5, "see": 6, "when": 7, "do": 8, "last": 9}
CONCEPT_TOKEN0 = 16
NLQ_TEMPLATES = (
    ("where", "is", "the", None),
    ("where", "did", "i", "see", "the", None),
    ("when", "did", "i", "last", "see", None),
)
MQ_TEMPLATE = ("when", "did", "i", "do", None)


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class GenConfig:
    num_concepts: int = 12
    pattern: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3
    noise: float = 0.1
    t_min: int = 64
    t_max: int = 256
    n_train: int = 200
    n_val: int = 50
    mq_text: bool = True
    grid_step: int = 4  # placements snap to multiples of this (1 = any pixel offset)
    seed: int = 0


@dataclass
class ConceptBank:
    patterns: np.ndarray  # [C, p, p, c]
    seed: int

    @property
    def size(self) -> int:
        return len(self.patterns)

    def token(self, concept: int) -> int:
        return CONCEPT_TOKEN0 + concept

    def phrase(self, concept: int, template) -> list:
        return [self.token(concept) if w is None else WORDS[w] for w in template]


def pattern_correlations(patterns: np.ndarray) -> np.ndarray:
    flat = patterns.reshape(len(patterns), -1)
    return np.corrcoef(flat)


def make_concept_bank(num: int, seed: int, pattern: int = 4, channels: int = 3,
                      max_corr: float = 0.5) -> ConceptBank:
    """``num`` standard-normal patterns with pairwise |correlation| < ``max_corr``."""
    if num < 2:
        raise ValueError("a concept bank needs at least 2 concepts")
    rng = np.random.default_rng([seed, 7919])
    pats: list = []
    while len(pats) < num:
        cand = rng.standard_normal((pattern, pattern, channels))
        if all(abs(np.corrcoef(cand.ravel(), p.ravel())[0, 1]) < max_corr for p in pats):
            pats.append(cand)
    return ConceptBank(np.stack(pats).astype(np.float32), seed)


@dataclass
class Occurrence:
    concept: int
    start: int
    end: int
    boxes: np.ndarray  # [(end - start + 1), 4] relative (cx, cy, w, h)
    offsets: np.ndarray  # [(end - start + 1), 2] integer (row, col) of the pattern corner


@dataclass
class Annotation:
    id: str
    task: str
    video_id: str
    query: Query
    segments: list
    concept: int
    boxes: np.ndarray | None = None
    query_frame: int | None = None


@dataclass
class SyntheticEpisode:
    id: str
    video: np.ndarray  # [T, H, W, c] float32
    occurrences: list
    annotations: list = field(default_factory=list)
    split: str = "train"

    @property
    def length(self) -> int:
        return len(self.video)


def _lengths(rng, kind: str, t: int) -> int:
    if kind == "short":
        n = 0.05 * t * np.exp(rng.normal(0.0, 0.25))
    elif kind == "medium":
        n = rng.uniform(0.05, 0.1) * t
    else:
        n = rng.uniform(0.06, 0.14) * t
    return int(max(3, round(n)))


def _place(rng, lengths: list, t: int, gap: int = 2, tries: int = 100) -> list:
    """Non-overlapping [s, e] intervals inside [0, t - 2]."""
    for _ in range(tries):
        order = rng.permutation(len(lengths))
        taken: list = []
        ok = True
        for i in order:
            n = lengths[i]
            hi = t - 1 - n  # last frame stays free for the query frame
            if hi < 0:
                ok = False
                break
            for _ in range(tries):
                s = int(rng.integers(0, hi + 1))
                e = s + n - 1
                if all(e + gap < a or s > b + gap for a, b, _ in taken):
                    taken.append((s, e, i))
                    break
            else:
                ok = False
                break
        if ok:
            taken.sort(key=lambda x: x[2])
            return [(s, e) for s, e, _ in taken]
    raise GenerationError(f"could not place {len(lengths)} segments in {t} frames")


def _trajectory(rng, s: int, e: int, cfg: GenConfig):
    p, g = cfg.pattern, cfg.grid_step
    ny, nx = (cfg.height - p) // g + 1, (cfg.width - p) // g + 1
    y0, x0 = rng.integers(0, ny), rng.integers(0, nx)
    y1, x1 = rng.integers(0, ny), rng.integers(0, nx)
    n = e - s + 1
    frac = np.arange(n) / max(n - 1, 1)
    ys = np.rint(y0 + (y1 - y0) * frac).astype(int) * g
    xs = np.rint(x0 + (x1 - x0) * frac).astype(int) * g
    boxes = np.stack([(xs + p / 2) / cfg.width, (ys + p / 2) / cfg.height,
                      np.full(n, p / cfg.width), np.full(n, p / cfg.height)], axis=1)
    return boxes, np.stack([ys, xs], axis=1)


def render(occurrences: list, bank: ConceptBank, t: int, cfg: GenConfig, rng) -> np.ndarray:
    video = rng.normal(0.0, cfg.noise, size=(t, cfg.height, cfg.width, cfg.channels))
    p = cfg.pattern
    for occ in occurrences:
        pat = bank.patterns[occ.concept]
        for i, (y, x) in enumerate(occ.offsets):
            video[occ.start + i, y:y + p, x:x + p, :] += pat
    return video.astype(np.float32)


def generate_episode(bank: ConceptBank, cfg: GenConfig, seed: int, episode_id: str | None = None,
                     split: str = "train") -> SyntheticEpisode:
    rng = np.random.default_rng([cfg.seed, seed])
    episode_id = episode_id or f"ep{seed:05d}"
    t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    roles = rng.permutation(bank.size)
    n_distract = int(rng.integers(1, 3))
    vq_c, nlq_c, mq_c = (int(c) for c in roles[:3])
    distract = [int(c) for c in roles[3:3 + n_distract]]

    plan = [(vq_c, "short")] * int(rng.integers(1, 4))
    plan += [(nlq_c, "medium")]
    plan += [(mq_c, "long")] * int(rng.integers(1, 5))
    for c in distract:
        plan += [(c, "short")] * int(rng.integers(1, 3))
    lengths = [_lengths(rng, kind, t) for _, kind in plan]
    budget = 0.55 * t
    if sum(lengths) > budget:
        shrink = budget / sum(lengths)
        lengths = [max(3, int(n * shrink)) for n in lengths]
    spans = _place(rng, lengths, t)

    occurrences = []
    for (concept, _), (s, e) in zip(plan, spans):
        boxes, offsets = _trajectory(rng, s, e, cfg)
        occurrences.append(Occurrence(concept, s, e, boxes, offsets))
    occurrences.sort(key=lambda o: (o.start, o.concept))
    video = render(occurrences, bank, t, cfg, rng)

    anns = []
    vq_occ = max((o for o in occurrences if o.concept == vq_c), key=lambda o: o.end)
    crop = bank.patterns[vq_c] + rng.normal(0.0, cfg.noise, size=bank.patterns[vq_c].shape)
    anns.append(Annotation(f"{episode_id}/vq2d", "vq2d", episode_id, Query("visual", crop.astype(np.float32)),
                           [(vq_occ.start, vq_occ.end)], vq_c, vq_occ.boxes.copy(), query_frame=t - 1))
    nlq_occ = next(o for o in occurrences if o.concept == nlq_c)
    template = NLQ_TEMPLATES[int(rng.integers(len(NLQ_TEMPLATES)))]
    anns.append(Annotation(f"{episode_id}/nlq", "nlq", episode_id, Query("text", bank.phrase(nlq_c, template)),
                           [(nlq_occ.start, nlq_occ.end)], nlq_c, nlq_occ.boxes.copy()))
    mq_occs = [o for o in occurrences if o.concept == mq_c]
    mq_query = Query("text", bank.phrase(mq_c, MQ_TEMPLATE)) if cfg.mq_text else Query("category", mq_c)
    anns.append(Annotation(f"{episode_id}/mq", "mq", episode_id, mq_query,
                           [(o.start, o.end) for o in mq_occs], mq_c))
    return SyntheticEpisode(episode_id, video, occurrences, anns, split)


def generate_dataset(cfg: GenConfig) -> tuple:
    bank = make_concept_bank(cfg.num_concepts, cfg.seed, cfg.pattern, cfg.channels)
    episodes = []
    for i in range(cfg.n_train + cfg.n_val):
        split = "train" if i < cfg.n_train else "val"
        episodes.append(generate_episode(bank, cfg, i, f"ep{i:05d}", split))
    return bank, episodes


def heldout_episodes(bank: ConceptBank, cfg: GenConfig, n: int, offset: int) -> list:
    """Fresh val-split episodes drawn from the same concept bank, seeded past the default dataset."""
    start = cfg.n_train + cfg.n_val + offset
    return [generate_episode(bank, cfg, i, f"ep{i:05d}", "val") for i in range(start, start + n)]


def layout_hash(ep: SyntheticEpisode) -> str:
    h = hashlib.sha256()
    h.update(str(ep.length).encode())
    for o in ep.occurrences:
        h.update(f"{o.concept}:{o.start}:{o.end};".encode())
        h.update(o.offsets.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- serialization

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "generator", "episodes", "annotations"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "generator": {"type": "object"},
        "concepts": {"type": "array"},
        "episodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "length", "file", "occurrences"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "split": {"enum": ["train", "val"]},
                    "length": {"type": "integer", "minimum": 1},
                    "file": {"type": "string"},
                    "occurrences": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["concept", "segment", "boxes", "offsets"],
                            "properties": {
                                "concept": {"type": "integer", "minimum": 0},
                                "segment": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                                "boxes": {"type": "array", "items": {"type": "array", "minItems": 4, "maxItems": 4}},
                                "offsets": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
                            },
                        },
                    },
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "task", "video_id", "query", "segments", "concept"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "task": {"enum": ["vq2d", "nlq", "mq"]},
                    "video_id": {"type": "string"},
                    "concept": {"type": "integer"},
                    "query": {
                        "type": "object",
                        "required": ["kind", "payload"],
                        "properties": {"kind": {"enum": ["visual", "text", "category"]}},
                    },
                    "segments": {"type": "array", "minItems": 1,
                                 "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
                    "boxes": {"type": ["array", "null"]},
                    "query_frame": {"type": ["integer", "null"]},
                },
            },
        },
    },
}


def write_tensor(path: Path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes())


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}")
    ndim = struct.unpack_from("<I", raw, 4)[0]
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    off = 8 + 4 * ndim
    n = int(np.prod(shape))
    if len(raw) - off != 4 * n:
        raise DatasetFormatError(f"{path}: expected {4 * n} data bytes for shape {shape}, found {len(raw) - off}")
    return np.frombuffer(raw, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def _query_json(q: Query):
    if q.kind == "visual":
        payload = np.asarray(q.payload, dtype=np.float32).tolist()
    elif q.kind == "text":
        payload = [int(x) for x in q.payload]
    else:
        payload = int(q.payload)
    return {"kind": q.kind, "payload": payload}


def _query_from_json(d) -> Query:
    if d["kind"] == "visual":
        return Query("visual", np.asarray(d["payload"], dtype=np.float32))
    if d["kind"] == "text":
        return Query("text", list(d["payload"]))
    return Query("category", int(d["payload"]))


def _f32_list(a) -> list:
    return np.asarray(a, dtype=np.float32).tolist()


def write_dataset(episodes: list, out_dir, gen_cfg: GenConfig | None = None, bank: ConceptBank | None = None):
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"parent directory {out_dir.parent} does not exist")
    (out_dir / "episodes").mkdir(parents=True, exist_ok=True)
    eps_json, anns_json = [], []
    for ep in episodes:
        rel = f"episodes/{ep.id}.bin"
        write_tensor(out_dir / rel, ep.video)
        eps_json.append({
            "id": ep.id, "split": ep.split, "length": ep.length, "file": rel,
            "occurrences": [{"concept": o.concept, "segment": [o.start, o.end],
                             "boxes": o.boxes.tolist(), "offsets": o.offsets.tolist()}
                            for o in ep.occurrences],
        })
        for a in ep.annotations:
            anns_json.append({
                "id": a.id, "task": a.task, "video_id": a.video_id, "concept": a.concept,
                "query": _query_json(a.query), "segments": [list(map(int, s)) for s in a.segments],
                "boxes": None if a.boxes is None else np.asarray(a.boxes).tolist(),
                "query_frame": a.query_frame,
            })
    manifest = {"format_version": FORMAT_VERSION, "generator": asdict(gen_cfg) if gen_cfg else {},
                "episodes": eps_json, "annotations": anns_json}
    if bank is not None:
        manifest["concepts"] = _f32_list(bank.patterns)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DatasetFormatError(f"{path}: {exc.message}") from exc
    return manifest


def read_dataset(data_dir, split: str | None = None) -> list:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    by_video: dict = {}
    for a in manifest["annotations"]:
        by_video.setdefault(a["video_id"], []).append(a)
    episodes = []
    for e in manifest["episodes"]:
        if split is not None and e["split"] != split:
            continue
        video = read_tensor(data_dir / e["file"])
        if len(video) != e["length"]:
            raise DatasetFormatError(f"{data_dir / e['file']}: length {len(video)} != manifest {e['length']}")
        occs = [Occurrence(o["concept"], o["segment"][0], o["segment"][1],
                           np.asarray(o["boxes"], dtype=np.float64), np.asarray(o["offsets"], dtype=int))
                for o in e["occurrences"]]
        anns = [Annotation(a["id"], a["task"], a["video_id"], _query_from_json(a["query"]),
                           [tuple(s) for s in a["segments"]], a["concept"],
                           None if a["boxes"] is None else np.asarray(a["boxes"], dtype=np.float64),
                           a["query_frame"])
                for a in by_video.get(e["id"], [])]
        episodes.append(SyntheticEpisode(e["id"], video, occs, anns, e["split"]))
    return episodes
