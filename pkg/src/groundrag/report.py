"""Write evaluation reports as JSON, CSV and PNG figures."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRIC_RANGES, EvalReport, _base  # noqa: E402


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def write_csv(report: EvalReport, path: str | Path) -> Path:
    """Per-sample table; columns are the union of row keys in first-seen order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: dict[str, None] = {}
    for row in report.per_sample:
        columns.update(dict.fromkeys(row))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in report.per_sample:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return path


def plot_report(report: EvalReport, path: str | Path) -> Path:
    """Bar chart of the headline metrics, plus a per-sample histogram when available."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.metrics)
    values = [report.metrics[n] for n in names]
    # per-sample column matching the first metric, if any
    key = _base(names[0]) if names else None
    samples = [r[key] for r in report.per_sample if isinstance(r.get(key), (int, float))] if key else []

    ncols = 2 if samples else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5.0 * ncols, 3.4), squeeze=False)
    ax = axes[0][0]
    ax.barh(range(len(names)), values, color="#4C72B0")
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.invert_yaxis()
    hi = max((METRIC_RANGES.get(_base(n), (0, v))[1] for n, v in zip(names, values)), default=1.0)
    if math.isfinite(hi) and hi > 0:
        ax.set_xlim(0, hi)
    for i, v in enumerate(values):
        ax.text(v, i, f" {v:.3g}", va="center", fontsize=7)
    ax.set_title(f"{report.kind} metrics", fontsize=10)
    ax.spines[["top", "right"]].set_visible(False)

    if samples:
        ax2 = axes[0][1]
        lo, hi = METRIC_RANGES.get(key, (min(samples), max(samples)))
        ax2.hist(samples, bins=20, range=(lo, hi) if hi > lo else None, color="#55A868")
        ax2.set_xlabel(key)
        ax2.set_ylabel("samples")
        ax2.set_title(f"per-sample {key}", fontsize=10)
        ax2.spines[["top", "right"]].set_visible(False)

    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_report(report: EvalReport, out: str | Path, csv_path: str | Path | None = None, figure: bool = True) -> dict[str, Any]:
    """Write ``out`` (JSON) plus a CSV and PNG next to it; returns the paths written."""
    out = Path(out)
    written = {"json": str(write_json(report, out))}
    stem = out.with_suffix("")
    written["csv"] = str(write_csv(report, csv_path or stem.with_suffix(".csv")))
    if figure and report.metrics:
        written["figure"] = str(plot_report(report, stem.with_suffix(".png")))
    return written
