"""``dplnet`` command line: train, eval, ablate, gradcheck, params, synth."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..backbone import ConfigError
from ..data import ManifestError, SynthSpec, UndefinedMetricError, read_manifest, synth_generate
from ..prompts import ValidationError
from .ablation import AXES, monotone_violations, run_ablation, to_csv
from .checkpoint import CheckpointError, load_checkpoint
from .config import load_config
from .evaluate import MS_SCALES, evaluate_ms_flip, evaluate_ss
from .gradcheck import DEFAULT_TOL, gradcheck_model
from .params import format_report, param_report
from .train import TrainingDivergedError, model_from_state, train


def thread_limit() -> int:
    raw = os.environ.get("DPLNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DPLNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DPLNET_THREADS must be >= 1")
    return n


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and (args.config or args.overrides):
        print("note: resuming uses the configuration stored in the checkpoint", file=sys.stderr)
    print(f"seed={cfg.seed if resume is None else '(from checkpoint)'}", file=sys.stderr)
    trainer = train(cfg, resume=resume, until_step=args.until_step)
    print(trainer.format_log())
    print(f"frozen-hash\t{trainer.frozen_digest}\tunchanged")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg, model = model_from_state(state)
    path = args.manifest or cfg.val_manifest
    if not path:
        raise ConfigError("no manifest given and the checkpoint config has no val_manifest")
    manifest = read_manifest(path)
    mode = args.mode or cfg.eval_mode.replace("_", "-")
    if mode == "ss":
        res = evaluate_ss(model, manifest)
    else:
        scales = tuple(float(s) for s in args.scales.split(",")) if args.scales else MS_SCALES
        res = evaluate_ms_flip(model, manifest, scales=scales, flip=not args.no_flip)
    print(res.format())
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.overrides)
    values = args.values.split(",") if args.values else None
    rows = run_ablation(args.axis, values, base, steps=args.steps)
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    bad = monotone_violations(args.axis, rows)
    for msg in bad:
        print(f"violation: {msg}", file=sys.stderr)
    return 1 if bad else 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_model(seed=args.seed, size=args.size, tol=args.tol)
    print(report.format())
    return 0 if report.passed else 1


def cmd_params(args) -> int:
    print(format_report(param_report(args.preset)))
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(size=args.size, num_classes=args.num_classes, seed=args.seed)
    manifest = synth_generate(spec, args.n, args.out, split=args.split)
    print(f"wrote {len(manifest)} samples to {Path(args.out) / args.split} and {Path(args.out) / (args.split + '.txt')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", help="config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until-step", type=int, help="stop after this many optimizer steps")
    t.add_argument("overrides", nargs="*", help="key=value overrides applied after the file")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", help="defaults to val_manifest from the checkpoint config")
    e.add_argument("--mode", choices=("ss", "ms-flip"))
    e.add_argument("--scales", help="comma-separated scales for ms-flip")
    e.add_argument("--no-flip", action="store_true", help="disable the flipped members in ms-flip")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="build and briefly train every variant along one axis")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--values", help="comma-separated values (defaults to the full axis)")
    a.add_argument("--config")
    a.add_argument("--steps", type=int, default=1)
    a.add_argument("--out", help="write the CSV table here as well")
    a.add_argument("overrides", nargs="*")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every trainable group")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("params", help="closed-form parameter report")
    r.add_argument("--preset", default="mit_b5_shape", choices=("toy", "mit_b5_shape"))
    r.set_defaults(fn=cmd_params)

    s = sub.add_parser("synth", help="write a synthetic RGB + aux dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--split", default="train")
    s.add_argument("--num-classes", type=int, default=5)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_limit()):
            return args.fn(args)
    except (ConfigError, ValidationError, ManifestError, CheckpointError, UndefinedMetricError,
            TrainingDivergedError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
