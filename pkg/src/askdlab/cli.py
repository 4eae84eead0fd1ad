"""Command-line front end.

Exit codes: 0 ok, 2 usage, 3 configuration, 4 training divergence.
Output defaults to ``$ASKDLAB_OUT`` (or ``./runs``) when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import taskgen
from .errors import ConfigError, DivergenceError
from .evalkit.experiments import (bench_latency, compare_methods, evaluate, latency_csv,
                                  sweep_alpha_min)
from .model import Decoder, FrozenEncoder, ModelSnapshot
from .schedule import trajectory_csv
from .taskgen import DatasetError, TaskSpec, load_dataset
from .trainer import Corpus, TrainConfig, distill, pretrain_teacher

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3, 4
OUT_ENV = "ASKDLAB_OUT"
METHODS = ("ce", "kd", "skd", "akd", "askd")

log = logging.getLogger("askdlab")


# ---------------------------------------------------------------------------
# config resolution: defaults < --config file < flags
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> TrainConfig:
    d = TrainConfig().to_dict()
    if args.config:
        try:
            d = _merge(d, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    flags = {
        "seed": args.seed,
        "method": getattr(args, "method", None),
        "train_path": getattr(args, "train", None),
        "val_path": getattr(args, "val", None),
        "teacher_path": getattr(args, "teacher", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "optimizer": getattr(args, "optimizer", None),
    }
    d = _merge(d, {k: v for k, v in flags.items() if v is not None})
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        d["schedule"]["total_epochs"] = epochs
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _write_resolved(out: Path, cfg: TrainConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"config": cfg.to_dict(), "hash": cfg.config_hash(), **(extra or {})}
    (out / "resolved_config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _require(value, field: str):
    if not value:
        raise ConfigError(f"{field} is required")
    return value


def _corpus(path, field: str, cfg: TrainConfig, encoder: FrozenEncoder) -> Corpus:
    _require(path, field)
    try:
        return Corpus(load_dataset(path, cfg.model_student.vocab_size), encoder)
    except DatasetError as exc:
        raise ConfigError(f"{field}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = TaskSpec(noise_std=args.noise_std, seed=args.seed or 0)
    out = _out_dir(args, "data")
    sizes = {"train": args.n_train, "val": args.n_val, "test": args.n_test, "shifted": args.n_shifted}
    for split, n in sizes.items():
        if n:
            taskgen.gen_dataset(spec, n, split, out / f"{split}.jsonl")
    print(out)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = resolve_config(args)
    enc = FrozenEncoder(cfg.encoder)
    train = _corpus(cfg.train_path, "train_path", cfg, enc)
    val = _corpus(cfg.val_path, "val_path", cfg, enc)
    out = _out_dir(args, "teacher")
    _write_resolved(out, cfg)
    snap = pretrain_teacher(train, val, cfg, out / "teacher.snap")
    print(f"teacher epoch {snap.epoch} -> {out / 'teacher.snap'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    _require(cfg.train_path, "train_path")
    if cfg.method.needs_teacher:
        _require(cfg.teacher_path, "teacher_path")
    out = _out_dir(args, f"{cfg.method.value}_seed{cfg.seed}")
    cfg = dataclasses.replace(cfg, checkpoint_dir=str(out))
    try:
        snap, reports = distill(cfg)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from None
    for r in reports:
        print(f"epoch {r.epoch} {r.phase:<3} loss {r.losses.l_total:.4f} val_ter {r.val_ter:.4f}")
    return EXIT_OK


def _load_run_config(path) -> TrainConfig:
    body = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(body.get("config", body))


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.run_config) if args.run_config else resolve_config(args)
    mcfg = cfg.model_teacher if args.role == "teacher" else cfg.student
    snap = ModelSnapshot.load(_require(args.snapshot, "snapshot"), mcfg.config_hash())
    enc = FrozenEncoder(cfg.encoder)
    data = _corpus(args.data, "data", cfg, enc)
    rep = evaluate(Decoder.from_snapshot(mcfg, snap), data, args.role, Path(args.data).stem)
    print(f"wer {rep.wer:.6f} s {rep.s} i {rep.i} d {rep.d}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(
            {"wer": rep.wer, "s": rep.s, "i": rep.i, "d": rep.d, "split": rep.split}) + "\n")
    return EXIT_OK


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    _require(cfg.train_path, "train_path")
    methods = [m.strip() for m in args.methods.split(",")]
    if any(m in ("kd", "akd", "askd") for m in methods):
        _require(cfg.teacher_path, "teacher_path")
    out = _out_dir(args, "compare")
    _write_resolved(out, cfg, {"methods": methods, "seeds": _seeds(args.seeds)})
    table = compare_methods(cfg, methods, _seeds(args.seeds), _require(args.test, "test"), out)
    print(table.format(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    _require(cfg.teacher_path, "teacher_path")
    floors = [float(a) for a in args.floors.split(",")]
    out = _out_dir(args, "sweep")
    _write_resolved(out, cfg, {"floors": floors, "seeds": _seeds(args.seeds), "variant": args.variant})
    result = sweep_alpha_min(cfg, floors, _seeds(args.seeds), _require(args.test, "test"), out,
                             method=args.variant)
    print(result.csv(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_run_config(args.run_config) if args.run_config else resolve_config(args)
    enc = FrozenEncoder(cfg.encoder)
    t_snap = ModelSnapshot.load(_require(args.teacher, "teacher"), cfg.model_teacher.config_hash())
    s_snap = ModelSnapshot.load(_require(args.student, "student"), cfg.student.config_hash())
    data = load_dataset(_require(args.data, "data"))[: args.limit]
    reports = bench_latency(Decoder.from_snapshot(cfg.model_teacher, t_snap),
                            Decoder.from_snapshot(cfg.student, s_snap), enc,
                            [u.frames for u in data], args.repetitions)
    text = latency_csv(reports)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "latency.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_dump_schedule(args) -> int:
    cfg = resolve_config(args)
    text = trajectory_csv(cfg.schedule)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "schedule.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--train")
    data.add_argument("--val")
    data.add_argument("--teacher", help="teacher snapshot")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--optimizer", choices=("sgd", "momentum", "adam"))
    train.add_argument("--epochs", type=int, help="total epochs E_t")

    p = argparse.ArgumentParser(prog="askdlab", description="Adaptive self-knowledge distillation lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val/test splits")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--n-shifted", type=int, default=200, help="held-out split with stronger noise")
    g.add_argument("--noise-std", type=float, default=TaskSpec.noise_std)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-teacher", parents=[common, data], help="pretrain the teacher decoder")
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", parents=[common, data, train], help="train one student")
    d.add_argument("--method", choices=METHODS)
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", parents=[common, data], help="score a snapshot on a dataset")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--role", choices=("student", "teacher"), default="student")
    e.add_argument("--run-config", help="config.json of the run that produced the snapshot")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", parents=[common, data, train], help="method comparison over seeds")
    c.add_argument("--methods", default=",".join(METHODS))
    c.add_argument("--seeds", default="0,1,2,3,4")
    c.add_argument("--test", required=True)
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep-alpha", parents=[common, data, train], help="alpha floor sweep")
    s.add_argument("--floors", default="0.3,0.5,0.7")
    s.add_argument("--variant", choices=("askd", "akd"), default="askd",
                   help="askd: floor is the switch threshold; akd: teacher term kept, clamped at the floor")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--test", required=True)
    s.set_defaults(fn=cmd_sweep)

    b = sub.add_parser("bench-latency", parents=[common], help="teacher vs student decode latency")
    b.add_argument("--teacher", required=True)
    b.add_argument("--student", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--limit", type=int, default=50)
    b.add_argument("--run-config")
    b.set_defaults(fn=cmd_bench)

    ds = sub.add_parser("dump-schedule", parents=[common], help="print the per-epoch alpha schedule")
    ds.set_defaults(fn=cmd_dump_schedule)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ValueError as exc:  # ConfigError, DatasetError and argument-range errors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
