"""Registry of 64-bit finite-difference checks for ops, loss terms and the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensors as tt
from .losses import foreground_bce, giou_loss, guided_attention_loss, kl_loss, l1_box_loss, make_targets, task_loss
from .model import GroundingModel, ModelConfig, Query
from .tensors import Tensor

OP_TOL = 1e-5
MODEL_TOL = 1e-4


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _weighted(fn):
    """Reduce a tensor-valued op to a scalar with a fixed random weighting."""
    def build(rng):
        a, b = _p(rng, 3, 4), _p(rng, 3, 4)
        out_shape = fn(a, b).shape
        w = rng.standard_normal(out_shape)
        return (lambda: tt.sum_(fn(a, b) * w)), [a, b]
    return build


OPS: dict = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (tt.abs_(b) + 0.5),
    "neg": lambda a, b: -a,
    "exp": lambda a, b: tt.exp(a),
    "log": lambda a, b: tt.log(tt.abs_(a) + 0.5),
    "sqrt": lambda a, b: tt.sqrt(tt.square(a) + 0.5),
    "square": lambda a, b: tt.square(a),
    "abs": lambda a, b: tt.abs_(a),
    "relu": lambda a, b: tt.relu(a),
    "sigmoid": lambda a, b: tt.sigmoid(a),
    "clamp": lambda a, b: tt.clamp(a, -0.7, 0.7),
    "maximum": lambda a, b: tt.maximum(a, b),
    "minimum": lambda a, b: tt.minimum(a, b),
    "sum": lambda a, b: tt.sum_(a, axis=0),
    "reshape": lambda a, b: tt.reshape(a, (4, 3)),
    "transpose": lambda a, b: tt.transpose(a),
    "getitem": lambda a, b: a[1:, ::2],
    "take": lambda a, b: tt.take(a, [0, 2, 2], axis=1),
    "concat": lambda a, b: tt.concat([a, b], axis=1),
    "stack": lambda a, b: tt.stack([a, b], axis=0),
    "broadcast_to": lambda a, b: tt.broadcast_to(tt.reshape(a, (1, 3, 4)), (2, 3, 4)),
    "matmul": lambda a, b: a @ tt.transpose(b),
    "softmax": lambda a, b: tt.softmax(a, axis=-1, mask=np.array([True, False, True, True])),
    "log_softmax": lambda a, b: tt.log_softmax(a, axis=0),
    "layer_norm": lambda a, b: tt.layer_norm(a, b[0], b[1]),
    "attention": lambda a, b: tt.attention(a, b, b * 2.0, heads=2)[0],
}


def _loss_case(kind):
    def build(rng):
        w = 6
        boxes = Tensor(rng.uniform(0.2, 0.8, (w, 4)), requires_grad=True, dtype=np.float64)
        logits = _p(rng, w)
        fg = Tensor(rng.uniform(0.1, 0.9, w), requires_grad=True, dtype=np.float64)
        maps_raw = rng.uniform(0.1, 1.0, (2, 2, w, w))
        maps = Tensor(maps_raw / maps_raw.sum(-1, keepdims=True), requires_grad=True, dtype=np.float64)
        tb = rng.uniform(0.25, 0.75, (w, 4))
        if kind == "l1":
            return (lambda: l1_box_loss(boxes, tb)), [boxes]
        if kind == "giou":
            return (lambda: giou_loss(boxes, tb)), [boxes]
        if kind == "kl":
            target = rng.dirichlet(np.ones(w))
            return (lambda: kl_loss(logits, target)), [logits]
        if kind == "bce":
            target = (rng.uniform(size=w) > 0.5).astype(float)
            return (lambda: foreground_bce(fg, target)), [fg]
        return (lambda: guided_attention_loss(maps, 1, 3)), [maps]
    return build


def _model_case(task):
    def build(rng):
        cfg = ModelConfig(d=8, n_enc=1, n_dec=1, heads=2, grid_h=2, grid_w=2, in_h=4, in_w=4, channels=2,
                          query_grid=1, vocab=10, num_classes=4, seed=int(rng.integers(1 << 30)))
        m = GroundingModel(cfg, dtype=np.float64)
        # zero-initialised biases can park ReLU inputs exactly on the kink
        for name, p in m.named_parameters():
            if name.endswith(".bias"):
                p.data = p.data + rng.normal(0.0, 0.1, p.data.shape)
        frames = rng.standard_normal((4, 4, 4, 2))
        if task == "vq2d":
            q = Query("visual", rng.standard_normal((2, 2, 2)))
        elif task == "nlq":
            q = Query("text", [1, 2, 3])
        else:
            q = Query("category", 1)
        tgt = make_targets(1, 2, 4, rng.uniform(0.3, 0.7, (2, 4)))
        named = list(m.named_parameters())

        def f():
            preds, maps = m.forward(frames, q)
            return task_loss(task, preds, maps, tgt)[0]
        return f, [p for _, p in named]
    return build


@dataclass
class Check:
    name: str
    kind: str  # op | loss | model
    build: Callable
    tol: float
    max_entries: int | None = None


def registry() -> list:
    checks = [Check(n, "op", _weighted(fn), OP_TOL) for n, fn in OPS.items()]
    checks += [Check(n, "loss", _loss_case(n), OP_TOL) for n in ("l1", "giou", "kl", "bce", "att")]
    checks += [Check(f"model_{t}", "model", _model_case(t), MODEL_TOL, max_entries=3) for t in ("vq2d", "nlq", "mq")]
    return checks


@dataclass
class CheckResult:
    name: str
    kind: str
    tol: float
    per_seed: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.per_seed, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def run_gradcheck(seeds: int = 10, kinds=("op", "loss", "model"), corrupt: tuple = (), base_seed: int = 0):
    """Run every registered check on ``seeds`` seeds; return results and wall time."""
    t0 = time.perf_counter()
    results = []
    with tt.corrupt(*corrupt):
        for chk in registry():
            if chk.kind not in kinds:
                continue
            res = CheckResult(chk.name, chk.kind, chk.tol)
            for s in range(seeds):
                rng = np.random.default_rng([base_seed, s])
                f, params = chk.build(rng)
                rep = tt.finite_diff_check(f, params, tol=chk.tol, max_entries=chk.max_entries, rng=rng)
                res.per_seed.append(rep.max_error)
            results.append(res)
    return results, time.perf_counter() - t0


def report_lines(results) -> list:
    return [f"{r.kind:<6s} {r.name:<14s} max_rel_err={r.max_error:.3e} tol={r.tol:.0e} "
            f"{'PASS' if r.passed else 'FAIL'}" for r in results]
