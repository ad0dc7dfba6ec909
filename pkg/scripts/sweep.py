"""Sweep one config field and report retcop's modality-1 forgetting.

    python3 scripts/sweep.py lambda_weight 0 0.5 1 2
    python3 scripts/sweep.py replay_fraction 0 0.1 0.25 0.5 --seeds 0 1
"""

import argparse
import dataclasses
import sys

import numpy as np

from ccpt.config import RunConfig, coerce_field
from ccpt.experiments import run_one


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("field")
    ap.add_argument("values", nargs="+")
    ap.add_argument("--strategy", default="retcop")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args(argv)

    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if args.field not in types or args.field in ("stages", "strategy", "output_dir"):
        ap.error(f"cannot sweep {args.field!r}")
    for raw in args.values:
        value = coerce_field(args.field, raw, types[args.field])
        runs = [run_one(args.strategy, s, **{args.field: value}) for s in args.seeds]
        fg = [100 * r.forgetting for r in runs]
        end = np.mean([min(r.stage_end_acc) for r in runs])
        print(f"{args.field} = {raw:<8} forgetting {np.mean(fg):5.1f} pp  worst stage-end ACC {end:.3f}",
              flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
