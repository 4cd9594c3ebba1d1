"""Command-line entry points.

Every artifact-producing command writes into a run directory named by a
hash of its inputs, under ``$MQT_RUN_ROOT`` (default ``./runs``), and leaves
a ``manifest.json`` describing how the outputs were made.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, parse_file
from .metrics import confusion, evaluate, margin_stats, predict_calls
from .model import CheckpointError, ModelConfig, MultiQT, load, predict, save
from .records import FormatError
from .stream import REFERENCE_GPU_OFFLINE_RTF, REFERENCE_GPU_STREAM_RTF, bench_offline, bench_rtf, stream_call
from .synthdata import (
    QUESTION_NAMES,
    SYMPTOM_NAMES,
    GenConfig,
    DatasetError,
    dump_call,
    generate,
    read_dataset,
    symptom_variant,
    write_dataset,
)
from .train import ABLATION_PA, ABLATION_PS, TrainConfig, fit, select_validation

RUN_ROOT_ENV = "MQT_RUN_ROOT"
log = logging.getLogger("multiqt")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    dataset_hash: str | None = None
    checkpoint_hash: str | None = None
    metrics: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    version: str = __version__

    def write(self, run_dir: Path) -> None:
        (run_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_dir(command: str, inputs: dict, explicit: str | None = None) -> Path:
    """Content-addressed output directory for ``command`` with ``inputs``."""
    if explicit:
        d = Path(explicit)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        d = root / f"{command}-{_digest(inputs)[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def _gen_config(args) -> GenConfig:
    base = GenConfig.desk() if args.preset == "desk" else GenConfig()
    if args.config:
        base = parse_file(_require(args.config, "--config"), base)
    over = {"seed": args.seed}
    if args.n is not None:
        over["n_calls"] = args.n
    if args.corruption is not None:
        over["corruption"] = args.corruption
    if args.sigma is not None:
        over["noise_sigma"] = args.sigma
    if args.task:
        over["task"] = args.task
    return replace(base, **over)


def _model_config(args) -> ModelConfig:
    base = ModelConfig.desk() if args.preset == "desk" else ModelConfig()
    over = {"modality": args.modality, "fusion": args.fusion}
    if args.multitask_beta is not None and args.multitask_beta > 0:
        over["multitask"] = True
    return replace(base, **over)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    if args.config:
        base = parse_file(_require(args.config, "--config"), base)
    over = {"seed": args.seed}
    for key, val in (("multitask_beta", args.multitask_beta), ("p_a", args.pa), ("p_s", args.ps),
                     ("epochs", args.epochs)):
        if val is not None:
            over[key] = val
    if args.fusion == "tensor":
        over["batch_size"] = 1
    return replace(base, **over)


def _names(task: str):
    return SYMPTOM_NAMES if task == "symptoms" else QUESTION_NAMES


# -- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _gen_config(args)
    out = run_dir("gen", {"gen": cfg.to_dict(), "folds": args.folds}, args.out)
    t = time.perf_counter()
    calls = symptom_variant(cfg) if cfg.task == "symptoms" else generate(cfg)
    digest = write_dataset(calls, out, args.folds, cfg)
    RunManifest("gen", {"gen": cfg.to_dict(), "folds": args.folds}, cfg.seed, digest,
                metrics={"n_calls": len(calls), "hours": sum(c.duration for c in calls) / 3600},
                wall_seconds=time.perf_counter() - t).write(out)
    print(f"dataset {digest[:16]}  {len(calls)} calls -> {out}")
    return 0


def _split(ds, test_fold: int):
    train, test = ds.split(test_fold)
    if not train or not test:
        raise UsageError(f"fold {test_fold} leaves an empty train or test split")
    return train, test


def _write_report(out: Path, report, task: str, extra: dict | None = None) -> dict:
    summary = report.summary()
    if extra:
        summary.update(extra)
    (out / "report.jsonl").write_text(report.timestep.to_jsonl() + report.instance.to_jsonl())
    names = _names(task)
    print(report.timestep.table(names))
    print(report.instance.table(names))
    return summary


def cmd_train(args) -> int:
    data = _require(args.data, "--data")
    ds = read_dataset(data)
    mcfg = _model_config(args)
    tcfg = _train_config(args)
    inputs = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": ds.digest, "fold": args.test_fold}
    out = run_dir("train", inputs, args.out)
    t = time.perf_counter()
    train_calls, test_calls = _split(ds, args.test_fold)
    fit_calls, val_calls = select_validation(train_calls, 0.1, tcfg.seed)
    res = fit(MultiQT.init(mcfg, seed=tcfg.seed), fit_calls, val_calls, tcfg)
    res.write_log(out / "train_log.jsonl")
    ckpt = out / "model.mqtm"
    save(res.model, ckpt, {"train": tcfg.to_dict(), "dataset": ds.digest, "best_epoch": res.best_epoch})
    report = evaluate(res.model, test_calls)
    task = ds.config.get("task", "questions") if ds.config else "questions"
    summary = _write_report(out, report, task, {"best_epoch": res.best_epoch})
    RunManifest("train", inputs, tcfg.seed, ds.digest, file_hash(ckpt), summary,
                time.perf_counter() - t).write(out)
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _require(args.checkpoint, "--checkpoint")
    ds = read_dataset(_require(args.data, "--data"))
    model = load(ckpt, expected_classes=args.classes)
    inputs = {"checkpoint": file_hash(ckpt), "data": ds.digest, "fold": args.test_fold,
              "permute": args.permute, "seed": args.seed}
    out = run_dir("eval", inputs, args.out)
    t = time.perf_counter()
    _, test_calls = _split(ds, args.test_fold)
    permute = None if args.permute == "none" else args.permute
    preds = predict_calls(model, test_calls, permute, args.seed)
    golds = [c.labels for c in test_calls]
    from .metrics import evaluate_labels
    report = evaluate_labels(preds, golds, model.config.n_classes)
    task = ds.config.get("task", "questions") if ds.config else "questions"
    summary = _write_report(out, report, task)
    conf = confusion(preds, golds, model.config.n_classes)
    margins = margin_stats(preds, golds, model.config.n_classes).summary()
    print(conf.table(_names(task)))
    summary.update(question_to_question=conf.question_to_question, margins=margins)
    RunManifest("eval", inputs, args.seed, ds.digest, file_hash(ckpt), summary,
                time.perf_counter() - t).write(out)
    return 0


def cmd_stream(args) -> int:
    ckpt = _require(args.checkpoint, "--checkpoint")
    ds = read_dataset(_require(args.data, "--data"))
    if not 0 <= args.call < len(ds.calls):
        raise UsageError(f"--call must be in [0, {len(ds.calls) - 1}]")
    model = load(ckpt)
    call = ds.calls[args.call]
    inputs = {"checkpoint": file_hash(ckpt), "data": ds.digest, "call": args.call,
              "chunk": args.chunk_seconds}
    out = run_dir("stream", inputs, args.out)
    t = time.perf_counter()
    chunk = max(2, int(round(args.chunk_seconds * 100)) // 2 * 2)
    probs = stream_call(model, call.x_a, call.x_s, chunk)
    wall = time.perf_counter() - t
    offline = predict(model, call.x_a, call.x_s)
    diff = float(np.abs(probs - offline).max()) if len(offline) else 0.0
    labels = probs.argmax(axis=1)
    np.savetxt(out / "labels.txt", labels, fmt="%d")
    metrics = {"steps": int(len(labels)), "max_abs_diff_vs_offline": diff,
               "audio_seconds": call.duration, "rtf": call.duration / wall}
    RunManifest("stream", inputs, 0, ds.digest, file_hash(ckpt), metrics, wall).write(out)
    print(f"{call.call_id}: {len(labels)} steps, max |stream - offline| = {diff:.2e}, RTF {metrics['rtf']:.1f}")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = load(_require(args.checkpoint, "--checkpoint"))
    else:
        cfg = ModelConfig.desk() if args.preset == "desk" else ModelConfig()
        model = MultiQT.init(cfg, seed=args.seed)
    inputs = {"model": model.config.to_dict(), "duration": args.duration, "chunk": args.chunk_seconds,
              "streams": args.streams, "seed": args.seed, "cpus": os.cpu_count()}
    out = run_dir("bench", inputs, args.out)
    t = time.perf_counter()
    reports = [bench_rtf(model, args.duration, args.chunk_seconds, 1, args.seed)]
    if args.streams > 1:
        reports.append(bench_rtf(model, args.duration, args.chunk_seconds, args.streams, args.seed))
    reports.append(bench_offline(model, args.duration, args.seed))
    for r in reports:
        print(r.table())
    print(f"reference (GPU, not a target): stream RTF {REFERENCE_GPU_STREAM_RTF}, offline RTF {REFERENCE_GPU_OFFLINE_RTF}")
    lines = [r.to_line() for r in reports]
    for line in lines:
        print(line)
    (out / "bench.txt").write_text("\n".join(lines) + "\n")
    RunManifest("bench", inputs, args.seed, metrics={r.mode + f"_x{r.n_parallel_streams}": r.rtf for r in reports},
                wall_seconds=time.perf_counter() - t).write(out)
    return 0


def cmd_ablate(args) -> int:
    ds = read_dataset(_require(args.data, "--data"))
    mcfg = replace(_model_config(args), modality="both")
    tcfg = _train_config(args)
    inputs = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": ds.digest, "fold": args.test_fold}
    out = run_dir("ablate", inputs, args.out)
    t = time.perf_counter()
    train_calls, test_calls = _split(ds, args.test_fold)
    fit_calls, val_calls = select_validation(train_calls, 0.1, tcfg.seed)
    from .experiments import ablation_grid
    models = {}
    for perm in (False, True):
        cfg = replace(tcfg, p_a=ABLATION_PA, p_s=ABLATION_PS) if perm else replace(tcfg, p_a=0.0, p_s=0.0)
        models[perm] = fit(MultiQT.init(mcfg, seed=tcfg.seed), fit_calls, val_calls, cfg).model
    grid = ablation_grid(models, test_calls, tcfg.seed)
    print(grid.table())
    rows = [{"permutation_training": perm, "test_permutation": test, "timestep_f1": ts, "instance_f1": inst}
            for (perm, test), (ts, inst) in sorted(grid.f1.items())]
    (out / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    RunManifest("ablate", inputs, tcfg.seed, ds.digest, None, {"grid": rows},
                time.perf_counter() - t).write(out)
    return 0


def cmd_dump(args) -> int:
    ds = read_dataset(_require(args.data, "--data"))
    if not 0 <= args.call < len(ds.calls):
        raise UsageError(f"--call must be in [0, {len(ds.calls) - 1}]")
    print(dump_call(ds.calls[args.call], args.max_steps))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiqt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, model=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="run directory (default: content-addressed under $MQT_RUN_ROOT)")
        sp.add_argument("--preset", choices=("desk", "full"), default="desk")
        if data:
            sp.add_argument("--data", help="dataset directory written by 'gen'")
            sp.add_argument("--test-fold", type=int, default=0)
        if model:
            sp.add_argument("--config", help="training config file (key = value lines)")
            sp.add_argument("--modality", choices=("audio", "text", "both"), default="both")
            sp.add_argument("--fusion", choices=("concat", "tensor"), default="concat")
            sp.add_argument("--multitask-beta", type=float)
            sp.add_argument("--pa", type=float, help="audio permutation probability")
            sp.add_argument("--ps", type=float, help="text permutation probability")
            sp.add_argument("--epochs", type=int)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, data=False)
    g.add_argument("--n", type=int)
    g.add_argument("--task", choices=("questions", "symptoms"))
    g.add_argument("--corruption", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--config", help="generator config file (key = value lines)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train MultiQT on one fold split")
    common(t, model=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test fold")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--permute", choices=("none", "audio", "text"), default="none")
    e.add_argument("--classes", type=int, help="expected number of classes")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="stream one call in chunks and compare with offline")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--call", type=int, default=0)
    s.add_argument("--chunk-seconds", type=float, default=1.0)
    s.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="real-time factor benchmark")
    common(b, data=False)
    b.add_argument("--checkpoint")
    b.add_argument("--chunk-seconds", type=float, default=1.0)
    b.add_argument("--duration", type=float, default=166.0)
    b.add_argument("--streams", type=int, default=1)
    b.set_defaults(func=cmd_bench, preset="full")

    a = sub.add_parser("ablate", help="modality permutation ablation grid")
    common(a, model=True)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump", help="print one call of a dataset")
    common(d)
    d.add_argument("--call", type=int, default=0)
    d.add_argument("--max-steps", type=int)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))   # exits 2
    except (FormatError, CheckpointError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
