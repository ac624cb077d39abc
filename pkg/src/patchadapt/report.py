"""Run reports: deterministic JSON files and the adaptation-order comparison table."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np

# row labels; tables list the modes in this order
ORDER_LABELS = {
    "no_curriculum": "all target patches at once",
    "reverse_features": "easy -> hard, D_E before D_F",
    "reverse_patches": "hard -> easy, D_F before D_E",
    "reverse_both": "hard -> easy, D_E before D_F",
    "canonical": "easy -> hard, D_F before D_E",
}


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a report file ({exc})") from exc


def pretrain_miou(report: dict) -> float | None:
    for st in report.get("stages", []):
        if st.get("name") == "pretrain":
            return st["test"]["miou"]
    return None


def comparison_rows(reports) -> list[dict]:
    """One row per curriculum mode, mIoU averaged over the seeds supplied."""
    by_mode = defaultdict(list)
    for rep in reports:
        by_mode[rep["mode"]].append(rep)
    rows = []
    for mode in list(ORDER_LABELS) + sorted(set(by_mode) - set(ORDER_LABELS)):
        if mode not in by_mode:
            continue
        reps = by_mode[mode]
        rows.append({
            "mode": mode,
            "label": ORDER_LABELS.get(mode, mode),
            "seeds": sorted(r["seed"] for r in reps),
            "final_miou": float(np.mean([r["final"]["test"]["miou"] for r in reps])),
            "final_f1": float(np.mean([r["final"]["test"]["mean_f1"] for r in reps])),
            "best_miou": float(np.mean([r["best"]["test"]["miou"] for r in reps])),
            "pretrain_miou": float(np.mean([pretrain_miou(r) for r in reps])),
        })
    return rows


def comparison_table(reports) -> str:
    rows = comparison_rows(reports)
    header = "target adaptation order\tseeds\tpretrain mIoU\tfinal mIoU\tfinal F1\tbest-val mIoU"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['label']}\t{','.join(map(str, r['seeds']))}\t{100 * r['pretrain_miou']:.2f}"
            f"\t{100 * r['final_miou']:.2f}\t{100 * r['final_f1']:.2f}\t{100 * r['best_miou']:.2f}"
        )
    return "\n".join(lines) + "\n"
