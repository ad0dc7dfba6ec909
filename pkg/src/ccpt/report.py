"""Plain-text forgetting table from one or more runs' metrics logs."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

from .evaluation import render_delta
from .pipeline import METRICS_FILE


def load_records(run_dir) -> list[dict]:
    path = Path(run_dir)
    if path.is_dir():
        path = path / METRICS_FILE
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cell(value: float, base: float | None) -> str:
    """Percent value, with the table's "(arrow delta)" suffix after the learning stage."""
    text = f"{100 * value:.1f}"
    if base is None:
        return text
    return f"{text}({render_delta(100 * base - 100 * value)})"


def render_report(run_dirs) -> str:
    """One section per modality: its learning-stage row, then one row per
    later stage and run, each cell shown as ``value(↓forgetting)``."""
    runs = [load_records(d) for d in run_dirs]
    by_mod: dict[int, list] = defaultdict(list)
    for recs in runs:
        for r in recs:
            by_mod[r["modality"]].append(r)

    header = f"{'Stage':>5} | {'Method':<15} | {'ZS ACC':>12} {'ZS AUC':>12} | {'LP ACC':>12} {'LP AUC':>12}"
    lines = []
    for mod in sorted(by_mod):
        recs = by_mod[mod]
        learned = min(r["stage"] for r in recs)
        lines.append(f"Modality {mod} (learned at stage {learned}); "
                     f"parentheses: forgetting relative to stage {learned}")
        lines.append(header)
        lines.append("-" * len(header))
        index = {(r["strategy"], r["stage"], r["setting"]): r for r in recs}
        strategies = list(dict.fromkeys(r["strategy"] for r in recs))
        stages = sorted({r["stage"] for r in recs})
        for stage in stages:
            for strat in strategies:
                row = []
                for setting in ("zeroshot", "linprobe"):
                    r = index.get((strat, stage, setting))
                    b = index.get((strat, learned, setting))
                    if r is None:
                        row += ["-", "-"]
                        continue
                    later = stage > learned
                    row.append(cell(r["acc"], b["acc"] if later and b else None))
                    row.append(cell(r["auc"], b["auc"] if later and b else None))
                lines.append(f"{stage:>5} | {strat:<15} | {row[0]:>12} {row[1]:>12} | {row[2]:>12} {row[3]:>12}")
        lines.append("")
    return "\n".join(lines)
