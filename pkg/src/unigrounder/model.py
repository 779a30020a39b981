"""The unified grounding network and its checkpoint format.

Pipeline per window: patch backbone -> modality-specific query encoder ->
per-frame video-query transformer encoder (optionally strided) ->
factorized space-time decoder seeded by modality time embeddings ->
per-frame heads ``[box(4), start, end, foreground]``.

Every forward is batched over a leading ``B`` axis; single-sample calls
just use ``B = 1``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from . import tensors as tt
from .tensors import Tensor

TASKS = ("vq2d", "nlq", "mq")
QUERY_KINDS = ("visual", "text", "category")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class InvalidQueryError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    grid_h: int = 4
    grid_w: int = 4
    in_h: int = 16
    in_w: int = 16
    channels: int = 3
    enc_stride: int = 1
    query_grid: int = 1  # visual crops are pooled to query_grid x query_grid tokens
    window: dict = field(default_factory=lambda: {"vq2d": 32, "nlq": 48, "mq": 48})
    vocab: int = 64
    num_classes: int = 12
    ffn_mult: int = 2
    shared_time_embedding: bool = False
    full_scale_preset: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.enc_stride < 1:
            raise ConfigError("enc_stride must be >= 1")
        if self.in_h % self.grid_h or self.in_w % self.grid_w:
            raise ConfigError("input grid is not divisible into the patch grid")
        for task, w in self.window.items():
            if w < 2:
                raise ConfigError(f"window for {task} must be >= 2")

    @property
    def patch(self) -> tuple:
        return self.in_h // self.grid_h, self.in_w // self.grid_w

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-size hyperparameters; documented, far too large to run here."""
        return cls(d=256, n_enc=6, n_dec=6, heads=8, grid_h=20, grid_w=20, in_h=320, in_w=320,
                   window={"vq2d": 200, "nlq": 400, "mq": 400}, vocab=50265, num_classes=110,
                   ffn_mult=8, full_scale_preset=True)


@dataclass
class Query:
    kind: str
    payload: object

    def validate(self, cfg: ModelConfig):
        if self.kind not in QUERY_KINDS:
            raise InvalidQueryError(f"unknown query kind {self.kind!r}")
        if self.kind == "text":
            toks = np.asarray(self.payload)
            if toks.size == 0:
                raise InvalidQueryError("empty token sequence")
            if toks.min() < 0 or toks.max() >= cfg.vocab:
                raise InvalidQueryError("token id outside vocabulary")
        elif self.kind == "category":
            c = int(self.payload)
            if not 0 <= c < cfg.num_classes:
                raise InvalidQueryError(f"class index {c} outside [0, {cfg.num_classes})")
        else:
            crop = np.asarray(self.payload)
            if crop.ndim != 3 or crop.shape[2] != cfg.channels:
                raise InvalidQueryError(f"visual crop must be H x W x {cfg.channels}")

    @property
    def modality(self) -> str:
        return "visual" if self.kind == "visual" else "text"


@dataclass
class FramePredictions:
    """Per-frame outputs; arrays may carry a leading batch axis."""

    boxes: np.ndarray | Tensor
    start_logits: np.ndarray | Tensor
    end_logits: np.ndarray | Tensor
    foreground: np.ndarray | Tensor

    def numpy(self) -> "FramePredictions":
        def a(x):
            return x.data if isinstance(x, Tensor) else np.asarray(x)
        return FramePredictions(a(self.boxes), a(self.start_logits), a(self.end_logits), a(self.foreground))

    def __len__(self):
        return self.start_logits.shape[-1]

    def stacked(self) -> np.ndarray:
        """``[..., T, 7]`` view: box(4), start, end, foreground."""
        p = self.numpy()
        return np.concatenate([p.boxes, p.start_logits[..., None], p.end_logits[..., None],
                               p.foreground[..., None]], axis=-1)

    @classmethod
    def from_stacked(cls, arr: np.ndarray) -> "FramePredictions":
        return cls(arr[..., :4], arr[..., 4], arr[..., 5], arr[..., 6])

    def slice(self, lo: int, hi: int) -> "FramePredictions":
        p = self.numpy()
        return FramePredictions(p.boxes[..., lo:hi, :], p.start_logits[..., lo:hi],
                                p.end_logits[..., lo:hi], p.foreground[..., lo:hi])


# ---------------------------------------------------------------- positional codes

def sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : (d - d // 2)]
    return out


def sinusoid_2d(h: int, w: int, d: int) -> np.ndarray:
    """Half the channels encode the row, half the column; flattened row-major."""
    dy = d // 2
    py = sinusoid(h, dy)[:, None, :].repeat(w, axis=1)
    px = sinusoid(w, d - dy)[None, :, :].repeat(h, axis=0)
    return np.concatenate([py, px], axis=-1).reshape(h * w, d)


# ---------------------------------------------------------------- modules

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


def _init(rng, shape, dtype, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, dtype=np.float32):
        self.weight = _init(rng, (n_in, n_out), dtype, n_in, n_out)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return tt.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return tt.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, rng, dims, dtype=np.float32):
        self.layers = [Linear(rng, a, b, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tt.relu(x)
        return x


class MultiHeadAttention(Module):
    def __init__(self, rng, d, heads, dtype=np.float32):
        self.heads = heads
        self.q = Linear(rng, d, d, dtype)
        self.k = Linear(rng, d, d, dtype)
        self.v = Linear(rng, d, d, dtype)
        self.o = Linear(rng, d, d, dtype)

    def __call__(self, xq, xkv, mask=None):
        out, w = tt.attention(self.q(xq), self.k(xkv), self.v(xkv), self.heads, mask)
        return self.o(out), w


class EncoderLayer(Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, rng, d, heads, ffn, dtype=np.float32):
        self.attn = MultiHeadAttention(rng, d, heads, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.ffn = MLP(rng, [d, ffn, d], dtype)
        self.norm2 = LayerNorm(d, dtype)

    def __call__(self, x, mask=None):
        a, _ = self.attn(x, x, mask)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    """Temporal self-attention, frame-wise cross-attention, feed-forward."""

    def __init__(self, rng, d, heads, ffn, dtype=np.float32):
        self.self_attn = MultiHeadAttention(rng, d, heads, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(rng, d, heads, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = MLP(rng, [d, ffn, d], dtype)
        self.norm3 = LayerNorm(d, dtype)

    def __call__(self, e, enc, enc_mask=None):
        # e: [B, T, d]; enc: [B, T, N, d]; enc_mask: [B, 1, N] keys allowed
        a, w = self.self_attn(e, e)
        e = self.norm1(e + a)
        b, t, d = e.shape
        eq = tt.reshape(e, (b, t, 1, d))
        mask = None if enc_mask is None else enc_mask[:, :, None, :]
        c, _ = self.cross_attn(eq, enc, mask)
        e = self.norm2(e + tt.reshape(c, (b, t, d)))
        e = self.norm3(e + self.ffn(e))
        return e, w


PARAM_GROUPS = ("backbone", "text", "rest")


class GroundingModel(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        ph, pw = cfg.patch
        ffn = cfg.ffn_mult * d
        self.patch_embed = Linear(rng, ph * pw * cfg.channels, d, dtype)
        self.token_embed = Tensor((rng.standard_normal((cfg.vocab, d)) * 0.5).astype(dtype), requires_grad=True)
        self.text_layer = EncoderLayer(rng, d, cfg.heads, ffn, dtype)
        self.category_mlp = Linear(rng, cfg.num_classes, d, dtype)
        self.encoder = [EncoderLayer(rng, d, cfg.heads, ffn, dtype) for _ in range(cfg.n_enc)]
        self.decoder = [DecoderLayer(rng, d, cfg.heads, ffn, dtype) for _ in range(cfg.n_dec)]
        self.time_visual = Tensor((rng.standard_normal(d) * 0.1).astype(dtype), requires_grad=True)
        if cfg.shared_time_embedding:
            self.time_text = self.time_visual
        else:
            self.time_text = Tensor((rng.standard_normal(d) * 0.1).astype(dtype), requires_grad=True)
        self.box_head = MLP(rng, [d, d, d, 4], dtype)
        self.start_head = Linear(rng, d, 1, dtype)
        self.end_head = Linear(rng, d, 1, dtype)
        self.fg_head = Linear(rng, d, 1, dtype)
        self._pos2d = sinusoid_2d(cfg.grid_h, cfg.grid_w, d).astype(dtype)
        self._posq = sinusoid_2d(cfg.query_grid, cfg.query_grid, d).astype(dtype)
        self.dtype = dtype

    # -- parameter bookkeeping

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def state(self) -> dict:
        return dict(self.named_parameters())

    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("patch_embed"):
            return "backbone"
        if name.startswith(("token_embed", "text_layer")):
            return "text"
        return "rest"

    def astype(self, dtype) -> "GroundingModel":
        other = GroundingModel(self.cfg, dtype)
        src = self.state()
        for name, p in other.named_parameters():
            p.data = src[name].data.astype(dtype).copy()
        return other

    # -- pipeline stages

    def encode_video(self, frames) -> Tensor:
        """``[B, T, H_in, W_in, c]`` raw grid -> ``[B, T, H*W, d]``."""
        cfg = self.cfg
        x = np.asarray(frames, dtype=self.dtype)
        squeeze = x.ndim == 4
        if squeeze:
            x = x[None]
        b, t, hi, wi, c = x.shape
        if (hi, wi, c) != (cfg.in_h, cfg.in_w, cfg.channels):
            raise ConfigError(f"frame grid {hi}x{wi}x{c} does not match config "
                              f"{cfg.in_h}x{cfg.in_w}x{cfg.channels}")
        patches = self._patchify(x.reshape(b * t, hi, wi, c), cfg.grid_h, cfg.grid_w)
        v = self.patch_embed(Tensor(patches)) + self._pos2d
        v = tt.reshape(v, (b, t, cfg.grid_h * cfg.grid_w, cfg.d))
        return v[0] if squeeze else v

    @staticmethod
    def _patchify(x: np.ndarray, gh: int, gw: int) -> np.ndarray:
        n, h, w, c = x.shape
        ph, pw = h // gh, w // gw
        if ph * gh != h or pw * gw != w:
            raise ConfigError(f"{h}x{w} grid is not divisible into {gh}x{gw} patches")
        x = x.reshape(n, gh, ph, gw, pw, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(n, gh * gw, ph * pw * c)

    def _resize_crop(self, crop: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        ph, pw = cfg.patch
        th, tw = cfg.query_grid * ph, cfg.query_grid * pw
        crop = np.asarray(crop, dtype=np.float64)
        if crop.shape[:2] != (th, tw):
            crop = ndimage.zoom(crop, (th / crop.shape[0], tw / crop.shape[1], 1), order=1, mode="nearest")
        return crop.astype(self.dtype)

    def encode_query(self, query: Query) -> Tensor:
        """One query -> ``[L, d]`` features."""
        cfg = self.cfg
        query.validate(cfg)
        if query.kind == "visual":
            crop = self._resize_crop(query.payload)
            patches = self._patchify(crop[None], cfg.query_grid, cfg.query_grid)[0]
            return self.patch_embed(Tensor(patches)) + self._posq
        if query.kind == "text":
            toks = np.asarray(query.payload, dtype=np.int64)
            x = tt.take(self.token_embed, toks, axis=0) + sinusoid(len(toks), cfg.d).astype(self.dtype)
            return self.text_layer(x)
        onehot = np.zeros((1, cfg.num_classes), dtype=self.dtype)
        onehot[0, int(query.payload)] = 1.0
        return self.category_mlp(Tensor(onehot))

    def encode_queries(self, queries: Sequence[Query]):
        """Batch of queries -> padded ``[B, L, d]`` and key mask ``[B, L]``."""
        feats = [self.encode_query(q) for q in queries]
        lmax = max(f.shape[0] for f in feats)
        mask = np.zeros((len(feats), lmax), dtype=bool)
        rows = []
        for i, f in enumerate(feats):
            mask[i, : f.shape[0]] = True
            if f.shape[0] < lmax:
                f = tt.concat([f, Tensor(np.zeros((lmax - f.shape[0], self.cfg.d), dtype=self.dtype))], axis=0)
            rows.append(f)
        return tt.stack(rows, axis=0), mask

    def video_query_encode(self, v: Tensor, q: Tensor, q_mask: np.ndarray | None = None) -> Tensor:
        """Fuse each selected frame with the query; replicate back to all T frames.

        ``v``: ``[B, T, HW, d]``, ``q``: ``[B, L, d]`` -> ``[B, T, HW + L, d]``.
        """
        b, t, hw, d = v.shape
        k = self.cfg.enc_stride
        sel = np.arange(0, t, k)
        if k > 1:
            v = tt.take(v, sel, axis=1)
        ts = len(sel)
        qb = tt.broadcast_to(tt.reshape(q, (b, 1) + q.shape[1:]), (b, ts) + q.shape[1:])
        x = tt.concat([v, qb], axis=2)
        n = x.shape[2]
        x = tt.reshape(x, (b * ts, n, d))
        mask = None
        if q_mask is not None and not q_mask.all():
            keys = np.concatenate([np.ones((b, hw), dtype=bool), q_mask], axis=1)
            mask = np.repeat(keys, ts, axis=0)[:, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        x = tt.reshape(x, (b, ts, n, d))
        if k > 1:
            x = tt.take(x, np.arange(t) // k, axis=1)
        return x

    def time_embeddings(self, modality: str, t: int) -> Tensor:
        vec = self.time_visual if modality == "visual" else self.time_text
        return tt.reshape(vec, (1, self.cfg.d)) + sinusoid(t, self.cfg.d).astype(self.dtype)

    def space_time_decode(self, enc: Tensor, modalities: Sequence[str], enc_mask: np.ndarray | None = None):
        """-> refined embeddings ``[B, T, d]`` and attention maps ``[B, N_d, heads, T, T]``."""
        b, t = enc.shape[:2]
        e = tt.stack([self.time_embeddings(m, t) for m in modalities], axis=0)
        maps = []
        for layer in self.decoder:
            e, w = layer(e, enc, enc_mask)
            maps.append(w)
        return e, tt.stack(maps, axis=1)

    def predict_heads(self, e: Tensor) -> FramePredictions:
        boxes = tt.sigmoid(self.box_head(e))
        start = self.start_head(e)
        end = self.end_head(e)
        fg = tt.sigmoid(self.fg_head(e))
        lead = e.shape[:-1]
        return FramePredictions(boxes, tt.reshape(start, lead), tt.reshape(end, lead), tt.reshape(fg, lead))

    def forward(self, frames, queries: Sequence[Query] | Query):
        """Batched forward. ``frames``: ``[B, T, H_in, W_in, c]`` (or unbatched with one query)."""
        single = isinstance(queries, Query)
        if single:
            queries = [queries]
            frames = np.asarray(frames)[None]
        frames = np.asarray(frames)
        v = self.encode_video(frames)
        q, q_mask = self.encode_queries(queries)
        enc = self.video_query_encode(v, q, q_mask)
        enc_mask = None
        if not q_mask.all():
            hw = v.shape[2]
            enc_mask = np.concatenate([np.ones((len(queries), hw), dtype=bool), q_mask], axis=1)[:, None, :]
        e, maps = self.space_time_decode(enc, [qq.modality for qq in queries], enc_mask)
        preds = self.predict_heads(e)
        if single:
            preds = FramePredictions(preds.boxes[0], preds.start_logits[0], preds.end_logits[0], preds.foreground[0])
            maps = maps[0]
        return preds, maps

    __call__ = forward

    # -- persistence

    def save(self, path: str | Path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "GroundingModel":
        return load_checkpoint(path)


def _ckpt_paths(path) -> tuple:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_checkpoint(model: GroundingModel, path, extra: dict | None = None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 blob)."""
    manifest_path, blob_path = _ckpt_paths(path)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
                "blob": blob_path.name, "params": entries}
    if extra:
        manifest["extra"] = extra
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1))


def read_checkpoint(path) -> tuple:
    manifest_path, blob_path = _ckpt_paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported format_version {manifest.get('format_version')}")
    blob = blob_path.read_bytes()
    arrays = {}
    for ent in manifest["params"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        if ent["offset"] + 4 * n > len(blob):
            raise CheckpointError(f"{blob_path}: truncated at parameter {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=ent["offset"]).reshape(ent["shape"]).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path) -> GroundingModel:
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig(**manifest["config"])
    model = GroundingModel(cfg)
    load_state(model, arrays)
    return model


def load_state(model: GroundingModel, arrays: dict):
    """Copy arrays into the model; every mismatch is reported at once."""
    params = model.state()
    bad = []
    for name, p in params.items():
        if name not in arrays:
            bad.append(f"{name}: missing")
        elif tuple(arrays[name].shape) != p.shape:
            bad.append(f"{name}: expected {p.shape}, got {tuple(arrays[name].shape)}")
    bad += [f"{name}: unexpected" for name in arrays if name not in params]
    if bad:
        raise CheckpointError("parameter shape mismatch:\n  " + "\n  ".join(bad))
    for name, p in params.items():
        p.data = np.array(arrays[name], dtype=p.dtype)
