"""Command line entry point: pretrain, eval, report, gradcheck, gen-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from .checkpoint import CheckpointCorruptError, CheckpointFormatError, load_checkpoint
from .config import ConfigError, load_config, load_modality_spec, parse_kv
from .evaluation import MetricError, linear_probe_eval, zero_shot_eval
from .synthstream import GenerationError, build_modality, sample_pairs, write_dataset

EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 2, 3, 1


def _pretrain(args) -> int:
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, expected=cfg)
        cfg = state.config
    t0 = time.perf_counter()
    state = run_pipeline(cfg, state)
    for r in state.records:
        if r.stage == len(cfg.stages):
            fg = "" if r.forgetting is None else f" forgetting={r.forgetting:+.3f}"
            print(f"stage {r.stage} modality {r.modality} {r.setting}: "
                  f"acc={r.acc:.3f} auc={r.auc:.3f}{fg}")
    print(f"done in {time.perf_counter() - t0:.1f}s; outputs in {cfg.output_dir}")
    return 0


def _eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    specs = {s.modality_id: s for s in cfg.stages}
    if args.modality not in specs:
        raise ConfigError(f"modality {args.modality} not in checkpoint stages {sorted(specs)}")
    gen = build_modality(specs[args.modality])
    seed = cfg.seed + 7919 * args.modality
    for setting in ("zeroshot", "linprobe"):
        if setting == "zeroshot":
            acc, auc = zero_shot_eval(state.params, gen, cfg.n_test, seed)
        else:
            acc, auc = linear_probe_eval(state.params, gen, cfg.n_probe_train, cfg.n_test, seed)
        print(json.dumps({"modality": args.modality, "setting": setting, "acc": acc, "auc": auc}))
    return 0


def _report(args) -> int:
    from .report import render_report

    print(render_report(args.runs))
    return 0


def _gradcheck(args) -> int:
    from .verify import TOLERANCE, run_gradcheck

    t0 = time.perf_counter()
    results = run_gradcheck(args.seed or 0)
    for name, err in results.items():
        print(f"{name:<20} max rel. err {err:.3e}")
    worst = max(results.values())
    ok = worst < TOLERANCE
    print(f"max rel. err {worst:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {TOLERANCE:g}) "
          f"in {time.perf_counter() - t0:.2f}s")
    return 0 if ok else EXIT_RUNTIME


def _gen_data(args) -> int:
    kv = parse_kv(open(args.spec, encoding="utf-8").read(), args.spec)
    n = int(kv.pop("n_samples", 1000))
    seed = int(kv.pop("seed", 0))
    if args.seed is not None:
        seed = args.seed
    from .config import modality_spec_from_kv

    spec = modality_spec_from_kv(kv, args.spec)
    batch = sample_pairs(build_modality(spec), n, np.random.default_rng(seed))
    write_dataset(args.out, batch)
    print(f"wrote {n} pairs ({spec.image_dim}+{spec.text_dim} dims) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccpt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_seed(p):
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        return p

    p = with_seed(sub.add_parser("pretrain", help="run the staged continual pre-training"))
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_pretrain)

    p = with_seed(sub.add_parser("eval", help="evaluate a checkpoint on one modality"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modality", type=int, required=True)
    p.set_defaults(func=_eval)

    p = sub.add_parser("report", help="forgetting table over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.set_defaults(func=_report)

    p = with_seed(sub.add_parser("gradcheck", help="finite-difference check of every op"))
    p.set_defaults(func=_gradcheck)

    p = with_seed(sub.add_parser("gen-data", help="dump a sampled dataset to a binary file"))
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointFormatError, CheckpointCorruptError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (MetricError, GenerationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
