"""Command-line entry point: ``gen``, ``train``, ``infer``, ``eval``, ``gradcheck``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error. Errors
are written to stderr as a single ``error: <kind>: <message>`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .inference import InferenceConfig, InferenceConfigError, write_predictions, read_predictions
from .metrics import Report
from .model import TASKS, CheckpointError, ConfigError, GroundingModel, ModelConfig, load_checkpoint, load_state, \
    read_checkpoint
from .pipeline import UnknownVideoError, baseline_report, evaluate, predict, random_box_iou_in_hits
from .synthgen import DatasetFormatError, GenConfig, GenerationError, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, TrainConfigError, TrainingDiverged, train

log = logging.getLogger("unigrounder")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "inference": InferenceConfig, "gen": GenConfig}
PATH_KEYS = ("data", "checkpoint", "predictions")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

@dataclasses.dataclass
class RunConfig:
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    inference: dict = dataclasses.field(default_factory=dict)
    gen: dict = dataclasses.field(default_factory=dict)
    paths: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config root must be an object")
        unknown = sorted(set(raw) - {"model", "train", "inference", "gen", "paths"})
        if unknown:
            raise UsageError(f"unknown config sections: {', '.join(unknown)}")
        for name, klass in SECTIONS.items():
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = sorted(set(raw.get(name, {})) - allowed)
            if bad:
                raise UsageError(f"unknown keys in '{name}': {', '.join(bad)}")
        bad = sorted(set(raw.get("paths", {})) - set(PATH_KEYS))
        if bad:
            raise UsageError(f"unknown keys in 'paths': {', '.join(bad)}")
        paths = {k: str((path.parent / v).resolve()) for k, v in raw.get("paths", {}).items()}
        return cls(raw.get("model", {}), raw.get("train", {}), raw.get("inference", {}), raw.get("gen", {}), paths)

    def build(self, section: str, seed: int | None = None, **overrides):
        kw = dict(getattr(self, section))
        if seed is not None and "seed" in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            kw["seed"] = seed
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SECTIONS[section](**kw)


def code_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(x).items()}
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


def write_run_meta(out: Path, command: str, seed: int, argv: list, configs: dict):
    meta = {"command": command, "seed": seed, "argv": argv, "code_version": code_version(),
            "python": platform.python_version(), "numpy": np.__version__,
            "config": _jsonable(configs)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_meta.json").write_text(json.dumps(meta, indent=1))


def _require(value, flag: str, cfg_key: str):
    if value is None:
        raise UsageError(f"missing {flag} (or paths.{cfg_key} in the config)")
    return value


def _csv(text: str | None, cast=str):
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"empty list {text!r}")
    try:
        return tuple(cast(t) for t in items)
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}") from exc


# ---------------------------------------------------------------- commands

def cmd_gen(args, rc: RunConfig, out: Path) -> int:
    cfg = rc.build("gen", args.seed, n_train=args.n_train, n_val=args.n_val)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    bank, episodes = generate_dataset(cfg)
    write_dataset(episodes, out, cfg, bank)
    write_run_meta(out, "gen", args.seed, sys.argv[1:], {"gen": cfg})
    print(f"wrote {len(episodes)} episodes to {out}")
    return 0


def cmd_train(args, rc: RunConfig, out: Path) -> int:
    data = _require(args.data or rc.paths.get("data"), "--data", "data")
    tasks = _csv(args.tasks)
    if tasks:
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise UsageError(f"unknown tasks: {', '.join(bad)}")
    tcfg = rc.build("train", args.seed, tasks=tasks, sampling=args.sampling, epochs=args.epochs)
    mcfg = rc.build("model", args.seed)
    model = GroundingModel(mcfg)
    if args.init_from:
        _, arrays = read_checkpoint(args.init_from)
        load_state(model, arrays)
    episodes = read_dataset(data, split="train")
    write_run_meta(out, "train", args.seed, sys.argv[1:], {"model": mcfg, "train": tcfg, "data": data,
                                                          "init_from": args.init_from})
    res = train(model, episodes, tcfg, out_dir=out, max_steps=args.max_steps)
    summary = {"epoch_means": res.epoch_means, "checkpoint": str(res.checkpoint)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_infer(args, rc: RunConfig, out: Path) -> int:
    ckpt = _require(args.checkpoint or rc.paths.get("checkpoint"), "--checkpoint", "checkpoint")
    data = _require(args.data or rc.paths.get("data"), "--data", "data")
    model = load_checkpoint(ckpt)
    base = rc.build("inference")
    overrides = dict(scales=_csv(args.scales, int), step=args.step)
    if args.no_foreground_head:
        overrides["use_foreground_head"] = False
    if args.emit_boxes:
        overrides["emit_boxes_for_temporal"] = True
    base = dataclasses.replace(base, **{k: v for k, v in overrides.items() if k != "step" and k != "scales"
                                        and v is not None})
    tasks = _csv(args.tasks) or TASKS
    episodes = read_dataset(data, split=args.split)
    records = predict(model, episodes, tasks, base, scales=overrides["scales"], step=overrides["step"])
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out / "predictions.jsonl")
    write_run_meta(out, "infer", args.seed, sys.argv[1:], {"inference": base, "overrides": overrides,
                                                          "checkpoint": ckpt, "data": data, "split": args.split})
    print(f"wrote {len(records)} predictions to {out / 'predictions.jsonl'}")
    return 0


def cmd_eval(args, rc: RunConfig, out: Path) -> int:
    data = _require(args.data or rc.paths.get("data"), "--data", "data")
    episodes = read_dataset(data, split=args.split)
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        seed = 0 if args.seed is None else args.seed
        table = baseline_report(episodes, args.baseline, seed=seed, repeats=args.repeats)
        report = Report(table["mean"])
        values = {"baseline": args.baseline, "repeats": args.repeats, **table}
    else:
        pred_path = _require(args.predictions or rc.paths.get("predictions"), "--predictions", "predictions")
        records = read_predictions(pred_path)
        report = evaluate(records, episodes)
        values = report.values
        if args.baseline_boxes:
            seed = 0 if args.seed is None else args.seed
            values.setdefault("nlq", {})["random_box_iou@hit"] = random_box_iou_in_hits(
                records, episodes, args.baseline_boxes, seed)
    (out / "report.json").write_text(json.dumps(values, indent=1))
    write_run_meta(out, "eval", args.seed, sys.argv[1:], {"data": data, "split": args.split})
    print(report.table())
    return 0


def cmd_gradcheck(args, rc: RunConfig, out: Path) -> int:
    corrupt = _csv(args.corrupt) or ()
    kinds = _csv(args.kinds) or ("op", "loss", "model")
    results, secs = gc.run_gradcheck(seeds=args.seeds, kinds=kinds, corrupt=corrupt,
                                     base_seed=0 if args.seed is None else args.seed)
    lines = gc.report_lines(results)
    print("\n".join(lines))
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in results)}/{len(results)} checks in {secs:.1f}s")
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(
        [{"name": r.name, "kind": r.kind, "tol": r.tol, "max_rel_err": r.max_error, "per_seed": r.per_seed,
          "passed": r.passed} for r in results], indent=1))
    write_run_meta(out, "gradcheck", args.seed, sys.argv[1:], {"corrupt": corrupt, "seeds": args.seeds})
    return 0 if ok else 2


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unigrounder", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="seed for generation, init, sampling")
    p.add_argument("--config", help="JSON run config with model/train/inference/gen/paths sections")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset into --out")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)

    t = sub.add_parser("train", help="train a model; checkpoint and loss log go to --out")
    t.add_argument("--data")
    t.add_argument("--tasks", help="comma-separated subset of vq2d,nlq,mq")
    t.add_argument("--sampling", choices=("round_robin", "concat"))
    t.add_argument("--init-from", help="checkpoint to start from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)

    i = sub.add_parser("infer", help="write predictions.jsonl to --out")
    i.add_argument("--checkpoint")
    i.add_argument("--data")
    i.add_argument("--split", default="val", choices=("train", "val"))
    i.add_argument("--tasks")
    i.add_argument("--scales", help="comma-separated temporal strides, e.g. 1,2,4")
    i.add_argument("--step", type=int, help="sliding-window step (default: half the window)")
    i.add_argument("--no-foreground-head", action="store_true", help="decode VQ2D over the whole video")
    i.add_argument("--emit-boxes", action="store_true", help="attach boxes to NLQ/MQ candidates")

    e = sub.add_parser("eval", help="score predictions (or a random baseline); report.json goes to --out")
    e.add_argument("--predictions")
    e.add_argument("--data")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--baseline", choices=("random_centered", "random_boxes"))
    e.add_argument("--baseline-boxes", choices=("random_centered", "random_boxes"),
                   help="also score random boxes inside the retrieved NLQ segments")
    e.add_argument("--repeats", type=int, default=5)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every op, loss term and the model")
    c.add_argument("--corrupt", help="comma-separated op names whose backward is deliberately scaled")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--kinds", help="subset of op,loss,model")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck}

CONFIG_ERRORS = (UsageError, ConfigError, TrainConfigError, InferenceConfigError, TypeError)
RUNTIME_ERRORS = (FileNotFoundError, GenerationError, DatasetFormatError, CheckpointError, UnknownVideoError,
                  TrainingDiverged, OSError, ValueError, KeyError)


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    print(f"error: {kind}: {type(exc).__name__}: {' '.join(msg.split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: gen, train, infer, eval, gradcheck")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = RunConfig.load(args.config)
        out = Path(args.out).resolve()
        return COMMANDS[args.command](args, rc, out)
    except CONFIG_ERRORS as exc:
        return _fail("config", exc, 1)
    except RUNTIME_ERRORS as exc:
        return _fail("runtime", exc, 2)


if __name__ == "__main__":
    sys.exit(main())
