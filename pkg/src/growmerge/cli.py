"""Command line entry point: ``growmerge <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .gradcheck import TOLERANCE, run_suite
from .memory import predict
from .metrics import clustering_accuracy
from .runner import PhaseError, load_checkpoint, load_config, report_dict, run_experiment
from .scenarios import generate_synthetic, load_csv, save_csv


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.scenario.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    res = run_experiment(cfg)
    print(json.dumps(report_dict(res.ledger, cfg.scenario.kind, cfg.seed, res.estimated_counts), indent=2))
    return 0


def _cmd_gen_data(args) -> int:
    samples = generate_synthetic(args.classes, args.per_class, args.dim, args.separation, args.seed)
    save_csv(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_estimate_k(args) -> int:
    cfg = load_config(args.config)
    cfg.novel_count = "estimate"
    res = run_experiment(cfg)
    print(json.dumps({"seed": cfg.seed, "estimated_counts": res.estimated_counts}))
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_suite(args.models, args.seed)
    for name, err in report.worst.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:>13s}  max rel err {err:.3e}  {status}")
    print(f"{report.n_models} models in {report.seconds:.1f}s")
    return 0 if report.passed else 1


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    test = load_csv(args.test, input_dim=ckpt.store.input_dim)
    if (test.labels < 0).any():
        raise ValueError("evaluation csv needs a label for every row")
    pred = predict(ckpt.store, ckpt.pair.dynamic, test.x, args.metric)
    out = {"n": int(len(test)), "accuracy": float(f"{clustering_accuracy(pred, test.labels):.12g}"),
           "timestep": ckpt.timestep, "classes": len(ckpt.store)}
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="growmerge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full timeline and write metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.set_defaults(func=_cmd_run)

    gen = sub.add_parser("gen-data", help="write a separable gaussian dataset as csv")
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--separation", type=float, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    est = sub.add_parser("estimate-k", help="run with estimated novel-class counts and print them")
    est.add_argument("--config", required=True)
    est.set_defaults(func=_cmd_estimate_k)

    gc = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    gc.add_argument("--models", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_gradcheck)

    ev = sub.add_parser("eval", help="nearest-prototype accuracy of a checkpoint on a labeled csv")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--metric", default="cosine", choices=["cosine", "sqeuclidean"])
    ev.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PhaseError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
