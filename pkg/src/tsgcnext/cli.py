"""Command-line entry point: ``tsgcnext {synth,train,eval,fuse,bench,gradcheck}``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 training divergence. Setting ``TSGCNEXT_OUTPUT_DIR`` overrides the
output directory of every command that writes files.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
import yaml

from . import engine as E
from .data import (SkeletonGraph, StreamKind, center_pose, load_sequences, mean_pose, resample_array,
                   save_sequences, stream_array, synth_dataset, to_arrays)
from .exceptions import ConfigError, DimensionError, DivergenceError, InputError, ParseError, UsageError
from .graph import DEFAULT_BENCH_SHAPES, backward_ratios, bench_formulations, read_bench_csv, shape_str
from .network import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import (FusionSpec, TrainConfig, evaluate, fused_scores, fusion_preset, load_yaml, predict_logits,
                       score_logits, train, write_metrics_csv)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
OUTPUT_ENV = "TSGCNEXT_OUTPUT_DIR"

_USAGE_ERRORS = (ConfigError, DimensionError, InputError, ParseError, UsageError, FileNotFoundError,
                 yaml.YAMLError)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- run configuration -------------------------------------------------------------


@dataclasses.dataclass
class DataConfig:
    train: Optional[str] = None
    eval: Optional[str] = None
    stream: str = "joint"
    center: bool = True
    root_joint: int = 0
    # subtract the training set's mean pose (stored in the checkpoint for eval)
    mean_pose: bool = True


@dataclasses.dataclass
class RunConfig:
    """Everything one training run needs; every Table 6 default is built in."""

    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {"model", "train", "data", "output_dir", "seed", "deterministic"}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError([f"unknown config section {k!r}" for k in extra])
        data = d.get("data") or {}
        bad = sorted(set(data) - {f.name for f in dataclasses.fields(DataConfig)})
        if bad:
            raise ConfigError([f"unknown data option {k!r}" for k in bad])
        return cls(dict(d.get("model") or {}), dict(d.get("train") or {}), DataConfig(**data),
                   str(d.get("output_dir", "runs/default")), int(d.get("seed", 0)),
                   bool(d.get("deterministic", False)))

    def to_dict(self) -> dict:
        return {"model": self.model, "train": self.train, "data": dataclasses.asdict(self.data),
                "output_dir": self.output_dir, "seed": self.seed, "deterministic": self.deterministic}


def _parse_value(text: str):
    return load_yaml(text)


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} must look like key.path=value"])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError([f"override {key!r}: {p!r} is not a section"])
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return d


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = load_yaml(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def output_dir(default: str) -> str:
    return os.environ.get(OUTPUT_ENV) or default


# -- dataset preparation -----------------------------------------------------------


def prepare_arrays(seqs, stream: str, T: int, center: bool = True, root_joint: int = 0,
                   parents=None):
    """SKL1 sequences -> model-ready ``X[n, 3, M, T, V]`` and ``y``."""
    if not seqs:
        raise InputError("dataset file holds no sequences")
    shapes = {(s.M, s.V) for s in seqs}
    if len(shapes) != 1:
        raise InputError(f"sequences disagree on (M, V): {sorted(shapes)}")
    V = seqs[0].V
    graph = SkeletonGraph(tuple(parents)) if parents is not None else SkeletonGraph.default_for(V)
    xs = []
    for s in seqs:
        c = s.coords
        if center:
            c = c - c[:, 0, 0, root_joint][:, None, None, None]
        xs.append(resample_array(stream_array(c, stream, graph.parents), T))
    return np.stack(xs), np.array([s.label for s in seqs], dtype=np.int64)


def _read_dataset(path: str):
    if not path or not os.path.exists(path):
        raise CliError(f"dataset not found: {path!r}")
    return load_sequences(path)


# -- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    seqs = synth_dataset(args.classes, args.per_class, args.V, args.T_raw, args.M, args.seed, args.noise)
    out = args.out
    if not os.path.isabs(out) and os.environ.get(OUTPUT_ENV):
        out = os.path.join(os.environ[OUTPUT_ENV], out)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_sequences(out, seqs)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def _resolve_train(args):
    overrides = list(args.set or [])
    for flag, key in (("scr", "model.scr"), ("mechanism", "model.mechanism"), ("stream", "data.stream"),
                      ("data", "data.train"), ("eval_data", "data.eval"), ("seed", "seed"),
                      ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    run = load_run_config(args.config, overrides)
    if args.deterministic:
        run.deterministic = True
    run.output_dir = output_dir(args.out_dir or run.output_dir)

    problems = []
    for label, path in (("train", run.data.train), ("eval", run.data.eval)):
        if label == "train" and not path:
            problems.append("data.train is required")
        elif path and not os.path.exists(path):
            problems.append(f"data.{label} not found: {path}")
    try:
        StreamKind(run.data.stream)
    except ValueError:
        problems.append(f"unknown stream {run.data.stream!r}")
    if problems:
        raise ConfigError(problems)

    train_seqs = load_sequences(run.data.train)
    if not train_seqs:
        raise ConfigError([f"{run.data.train} holds no sequences"])
    model_d = dict(run.model)
    model_d.setdefault("V", train_seqs[0].V)
    model_d.setdefault("M", train_seqs[0].M)
    model_d.setdefault("num_classes", int(max(s.label for s in train_seqs)) + 1)
    mcfg = ModelConfig.from_dict(model_d).validate()
    tcfg = TrainConfig.from_dict({**run.train, "seed": run.seed}).validate()
    return run, mcfg, tcfg, train_seqs


def cmd_train(args) -> int:
    run, mcfg, tcfg, train_seqs = _resolve_train(args)
    d = run.data
    X, y = prepare_arrays(train_seqs, d.stream, mcfg.T, d.center, d.root_joint, mcfg.parents)
    ev = None
    if d.eval:
        ev = prepare_arrays(load_sequences(d.eval), d.stream, mcfg.T, d.center, d.root_joint, mcfg.parents)
    pose = None
    if d.mean_pose:
        pose = mean_pose(X)
        X = center_pose(X, pose)
        if ev is not None:
            ev = (center_pose(ev[0], pose), ev[1])
    E.set_deterministic(run.deterministic)
    model = build_model(mcfg, seed=run.seed)

    def progress(epoch, result):
        rows = [r for r in result.log if r.epoch == epoch]
        print(f"epoch {epoch:4d}  " + "  ".join(f"{r.split}/{r.weights} loss={r.loss:.4f} acc={r.accuracy:.4f}"
                                             for r in rows), flush=True)

    result = train(model, (X, y), tcfg, ev, callbacks=[progress])
    os.makedirs(run.output_dir, exist_ok=True)
    meta = {"data": dataclasses.asdict(d), "train": tcfg.to_dict(), "seed": run.seed, "epochs_run": result.epochs_run,
            "pose_mean": None if pose is None else pose.tolist()}
    save_checkpoint(os.path.join(run.output_dir, "final.ckpt"), result.model, {**meta, "weights": "raw"})
    save_checkpoint(os.path.join(run.output_dir, "ema.ckpt"), result.ema_model(), {**meta, "weights": "ema"})
    write_metrics_csv(os.path.join(run.output_dir, "metrics.csv"), result.log)
    with open(os.path.join(run.output_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump({**run.to_dict(), "model": mcfg.to_dict(), "train": tcfg.to_dict()}, fh, sort_keys=True)
    print(f"wrote checkpoints and metrics to {run.output_dir}")
    return EXIT_OK


def _load_ckpt(path: str):
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path!r}")
    try:
        return load_checkpoint(path)
    except (ParseError, ConfigError, DimensionError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def _checkpoint_logits(model, meta, seqs, stream_override=None):
    d = meta.get("data", {})
    stream = stream_override or d.get("stream", "joint")
    X, y = prepare_arrays(seqs, stream, model.cfg.T, d.get("center", True), d.get("root_joint", 0),
                          model.cfg.parents)
    if X.shape[2] != model.cfg.M or X.shape[4] != model.cfg.V:
        raise CliError(f"dataset has M={X.shape[2]}, V={X.shape[4]}; checkpoint expects "
                       f"M={model.cfg.M}, V={model.cfg.V}")
    if meta.get("pose_mean") is not None:
        if stream != d.get("stream", "joint"):
            raise CliError(f"checkpoint was trained on the {d.get('stream')} stream and carries that stream's "
                           f"mean pose; cannot score it on {stream}")
        X = center_pose(X, np.asarray(meta["pose_mean"]))
    return predict_logits(model, X), y


def _write_report(report: dict, path: Optional[str]) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if path:
        path = path if os.path.isabs(path) or not os.environ.get(OUTPUT_ENV) else os.path.join(os.environ[OUTPUT_ENV], path)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text + "\n")


def cmd_eval(args) -> int:
    seqs = _read_dataset(args.data)
    model, meta = _load_ckpt(args.checkpoint)
    logits, y = _checkpoint_logits(model, meta, seqs, args.stream)
    r = score_logits(logits, y)
    _write_report({"checkpoint": args.checkpoint, "accuracy": r.accuracy,
                   "per_class": {str(k): v for k, v in r.per_class.items()}, "n": int(len(y))}, args.report)
    return EXIT_OK


def _entry_checkpoint(entry) -> str:
    path = entry.checkpoint
    if path is None:
        raise CliError(f"fusion entry {entry.stream.value} {entry.scr} has no checkpoint")
    if os.path.isdir(path):
        path = os.path.join(path, "ema.ckpt" if entry.use_ema else "final.ckpt")
    return path


def cmd_fuse(args) -> int:
    if args.spec:
        if not os.path.exists(args.spec):
            raise CliError(f"fusion spec not found: {args.spec!r}")
        spec = FusionSpec.from_yaml(args.spec)
    elif args.preset:
        spec = fusion_preset(args.preset, args.checkpoints)
    else:
        raise CliError("give --spec or --preset")
    seqs = _read_dataset(args.data)
    logits, streams, y = [], [], None
    for entry in spec.entries:
        path = _entry_checkpoint(entry)
        model, meta = _load_ckpt(path)
        z, y_e = _checkpoint_logits(model, meta, seqs, entry.stream.value)
        y = y_e
        logits.append(z)
        acc = score_logits(z, y_e).accuracy
        streams.append({"stream": entry.stream.value, "scr": ":".join(map(str, entry.scr)), "ema": entry.use_ema,
                        "weight": entry.weight, "checkpoint": path, "accuracy": acc})
    scores = fused_scores(spec, logits)
    fused = float((scores.argmax(axis=1) == y).mean())
    _write_report({"spec": spec.name, "streams": streams, "fused_accuracy": fused, "n": int(len(y))}, args.report)
    return EXIT_OK


def parse_shape(text: str):
    parts = text.lower().replace(",", "x").split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError(f"cannot parse shape {text!r}; expected NxCxTxVxK") from None
    if len(shape) != 5 or min(shape) < 1:
        raise CliError(f"shape {text!r} needs five positive extents N x C x T x V x K")
    return shape


def cmd_bench(args) -> int:
    if args.reps < 5:
        raise CliError(f"--reps must be >= 5, got {args.reps}")
    shapes = [parse_shape(s) for s in args.shapes] if args.shapes else list(DEFAULT_BENCH_SHAPES)
    out_dir = output_dir(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "bench.csv")
    E.set_deterministic(args.deterministic)
    records = bench_formulations(shapes, reps=args.reps, warmup=args.warmup, seed=args.seed, csv_path=csv_path,
                                 progress=lambda r: print(f"{shape_str(r.shape)} {r.formulation:8s} "
                                                           f"fwd {r.forward_ms:.2f} ms  bwd {r.backward_ms:.2f} ms",
                                                           flush=True))
    ratios = backward_ratios(records)
    lines = ["shape                 fwd base ms  fwd rep ms  bwd base ms  bwd rep ms  bwd ratio rep/base  max diff"]
    by = {(r.shape, r.formulation): r for r in records}
    for shape in dict.fromkeys(r.shape for r in records):
        b, r = by[(shape, "baseline")], by[(shape, "repeated")]
        lines.append(f"{shape_str(shape):20s} {b.forward_ms:11.2f} {r.forward_ms:11.2f} {b.backward_ms:12.2f} "
                     f"{r.backward_ms:11.2f} {ratios[shape]:19.3f}  {max(b.max_abs_diff, r.max_abs_diff):.2e}")
    lines.append("measured backward-time ratio (repeated / baseline): "
                 + ", ".join(f"{shape_str(s)}={v:.3f}" for s, v in ratios.items()))
    report = "\n".join(lines)
    print(report)
    with open(os.path.join(out_dir, "bench_report.txt"), "w") as fh:
        fh.write(report + "\n")
    if args.plot:
        plot_bench(csv_path, os.path.join(out_dir, "bench.png"))
    worst = max(r.max_abs_diff for r in records)
    if worst >= 1e-10:
        print(f"formulations disagree during the benchmark: max diff {worst:.3e}")
        return EXIT_VERIFY
    return EXIT_OK


def plot_bench(csv_path: str, png_path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_bench_csv(csv_path)
    shapes = list(dict.fromkeys(r["shape"] for r in rows))
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.2
    for i, (form, phase) in enumerate([(f, p) for f in ("baseline", "repeated") for p in ("forward", "backward")]):
        vals = [next(float(r["median_ms"]) for r in rows if r["shape"] == s and r["formulation"] == form
                     and r["phase"] == phase) for s in shapes]
        ax.bar(np.arange(len(shapes)) + (i - 1.5) * width, vals, width, label=f"{form} {phase}")
    ax.set_xticks(np.arange(len(shapes)))
    ax.set_xticklabels([shape_str(s) for s in shapes], rotation=15, fontsize=8)
    ax.set_ylabel("median ms")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def cmd_gradcheck(args) -> int:
    from .gradcheck import EQUIV_SHAPES, run_gradcheck

    report = run_gradcheck(seeds=args.seeds, equivalence_shapes=EQUIV_SHAPES if not args.quick else EQUIV_SHAPES[:1],
                           equivalence_trials=args.trials)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFY


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsgcnext", description="Skeleton action recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic SKL1 dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--V", type=int, default=15)
    s.add_argument("--T-raw", type=int, default=64)
    s.add_argument("--M", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.epochs=30")
    t.add_argument("--data", help="training SKL1 file (data.train)")
    t.add_argument("--eval-data", help="held-out SKL1 file (data.eval)")
    t.add_argument("--scr", help="stage compute ratio, 2:5:2 or 4:3:2")
    t.add_argument("--mechanism", help="none, classical, smg or ds-smg")
    t.add_argument("--stream", help="joint, bone, joint_motion or bone_motion")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--stream", help="override the stream stored in the checkpoint")
    e.add_argument("--report", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="weighted softmax fusion of several checkpoints")
    f.add_argument("--spec", help="YAML fusion spec")
    f.add_argument("--preset", help="published weight preset name")
    f.add_argument("--checkpoints", nargs="*", help="checkpoints for --preset, in preset order")
    f.add_argument("--data", required=True)
    f.add_argument("--report")
    f.set_defaults(func=cmd_fuse)

    b = sub.add_parser("bench", help="time the baseline and repeated node-mixing formulations")
    b.add_argument("--shapes", nargs="*", help="NxCxTxVxK shapes (default: the built-in set)")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", default="bench")
    b.add_argument("--plot", action="store_true")
    b.add_argument("--deterministic", action="store_true")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference and formulation-equivalence checks")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--quick", action="store_true", help="skip the large equivalence shape")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
