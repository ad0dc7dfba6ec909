"""Compare strategies on the default stream and print modality-1 forgetting.

    python3 scripts/run_forgetting.py --seeds 0 1 2
    python3 scripts/run_forgetting.py --strategies retcop seqft --out runs/cmp

With --out each run also writes its metrics log, so `ccpt report --runs
runs/cmp/*` renders the full table afterwards.
"""

import argparse
import sys

import numpy as np

from ccpt.config import load_config, RunConfig
from ccpt.experiments import COMPARED, compare, ordering_checks, run_one
from ccpt.pipeline import run_pipeline


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategies", nargs="+", default=list(COMPARED))
    ap.add_argument("--config", help="base config; defaults otherwise")
    ap.add_argument("--out", help="directory for per-run metrics logs")
    args = ap.parse_args(argv)

    base = load_config(args.config) if args.config else RunConfig()
    if args.out:
        for seed in args.seeds:
            for strategy in args.strategies:
                cfg = base.replace(strategy=strategy, seed=seed,
                                   output_dir=f"{args.out}/{strategy}-s{seed}")
                run_pipeline(cfg)
                print(f"wrote {cfg.output_dir}", flush=True)
        return 0

    def show(r):
        print(f"{r.strategy:<15} seed {r.seed}: forgetting {100 * r.forgetting:5.1f} pp  "
              f"stage-end ACC {' '.join(f'{a:.3f}' for a in r.stage_end_acc)}  ({r.seconds:.0f}s)",
              flush=True)

    runs = compare(args.seeds, args.strategies, base, progress=show)
    print()
    for s in args.strategies:
        vals = [100 * r.forgetting for r in runs if r.strategy == s]
        print(f"{s:<15} mean {np.mean(vals):5.1f} pp  (min {min(vals):.1f}, max {max(vals):.1f})")
    if set(COMPARED) <= set(args.strategies):
        print()
        for name, ok in ordering_checks(runs).items():
            print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
