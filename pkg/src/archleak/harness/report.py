"""Render tables and figures from stored records."""

from __future__ import annotations

import csv
import hashlib
import json
from enum import Enum
from pathlib import Path
from statistics import median

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..evalkit import roc  # noqa: E402
from .store import ResultRecord  # noqa: E402

GRID_ITERATIONS = (1, 50, 100, 1000, 3000)
LEADING_METRICS = ("mse", "psnr", "ssim", "attack_acc", "auc", "macro_f1")


class ReportError(ValueError):
    pass


class ReportKind(str, Enum):
    TABLE = "Table"
    ROC_PLOT = "RocPlot"
    LADDER_PLOT = "LadderPlot"
    SWEEP_PLOT = "SweepPlot"
    SNAPSHOT_GRID = "SnapshotGrid"


def _check(records: list[ResultRecord]) -> str:
    records = [r for r in records if r.ok]
    if not records:
        raise ReportError("no successful records to report")
    presets = {r.preset for r in records}
    if len(presets) > 1:
        raise ReportError(f"records mix presets {sorted(presets)}")
    return presets.pop()


def _stem(records: list[ResultRecord], kind: ReportKind) -> str:
    hashes = sorted({r.config_hash for r in records})
    key = hashes[0] if len(hashes) == 1 else \
        hashlib.sha256(",".join(hashes).encode()).hexdigest()[:16]
    return f"{records[0].preset}-{key}-{kind.value}"


def _label(cell: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(cell.items()))


def _scalar_metrics(records) -> list[str]:
    names = {k for r in records for k, v in r.metrics.items()
             if isinstance(v, (int, float)) and not isinstance(v, bool)}
    lead = [m for m in LEADING_METRICS if m in names]
    return lead + sorted(names - set(lead))


def table(records: list[ResultRecord], out_dir: Path) -> list[Path]:
    records = [r for r in records if r.ok]
    cell_keys = sorted({k for r in records for k in r.cell})
    metric_names = _scalar_metrics(records)
    header = cell_keys + metric_names + ["seed"]
    rows = []
    for r in sorted(records, key=lambda r: (r.cell_key, r.seed)):
        row = [r.cell.get(k, "") for k in cell_keys]
        row += [r.metrics.get(m, "") for m in metric_names]
        rows.append(row + [r.seed])
    stem = _stem(records, ReportKind.TABLE)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    text_rows = [header] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in text_rows) for i in range(len(header))]
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text("\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths))
                                  for row in text_rows) + "\n")
    return [csv_path, txt_path]


def roc_plot(records, out_dir: Path, log_scale: bool = True) -> list[Path]:
    records = [r for r in records if r.ok and "scores" in r.artifacts]
    if not records:
        raise ReportError("RocPlot needs records with a scores artifact")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for r in records:
        blob = np.load(r.artifacts["scores"])
        curve = roc(blob["scores"], blob["labels"])
        ax.plot(curve.fpr, curve.tpr, label=f"{_label(r.cell)} s{r.seed} (AUC {curve.auc:.3f})")
    lo = 1e-3
    if log_scale:
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlim(lo, 1)
        ax.set_ylim(lo, 1)
    ax.plot([lo, 1], [lo, 1], "k--", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=6)
    path = out_dir / f"{_stem(records, ReportKind.ROC_PLOT)}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def _grouped(records, x_key, metric):
    groups: dict = {}
    for r in records:
        if metric in r.metrics:
            x = r.cell.get(x_key, _label(r.cell)) if x_key else _label(r.cell)
            groups.setdefault(x, []).append(r.metrics[metric])
    return groups


def ladder_plot(records, out_dir: Path, metric: str = "mse") -> list[Path]:
    records = [r for r in records if r.ok]
    x_key = "step" if all("step" in r.cell for r in records) else None
    groups = _grouped(records, x_key, metric)
    if not groups:
        raise ReportError(f"no records carry metric {metric!r}")
    xs = sorted(groups, key=lambda v: (isinstance(v, str), v))
    pos = {x: i for i, x in enumerate(xs)}
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(xs)), 3.5))
    for x in xs:
        ax.scatter([pos[x]] * len(groups[x]), groups[x], s=10, color="0.6")
    ax.plot(range(len(xs)), [median(groups[x]) for x in xs], "o-", color="C0", label="median")
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels([str(x) for x in xs], rotation=0 if x_key else 45, fontsize=7)
    ax.set_xlabel(x_key or "cell")
    ax.set_ylabel(metric)
    if metric == "mse":
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"{_stem(records, ReportKind.LADDER_PLOT)}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def sweep_plot(records, out_dir: Path, metrics=("auc", "victim_test_acc")) -> list[Path]:
    records = [r for r in records if r.ok and "sigma" in r.cell]
    if not records:
        raise ReportError("SweepPlot needs records with a sigma cell")
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for m in metrics:
        groups = _grouped(records, "sigma", m)
        xs = sorted(groups)
        if xs:
            ax.plot(xs, [median(groups[x]) for x in xs], "o-", label=m)
    ax.set_xlabel("noise multiplier")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"{_stem(records, ReportKind.SWEEP_PLOT)}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def snapshot_grid(records, out_dir: Path, iterations=GRID_ITERATIONS) -> list[Path]:
    records = [r for r in records if r.ok and "snapshots" in r.artifacts]
    if not records:
        raise ReportError("SnapshotGrid needs records with a snapshots artifact")
    rows = []
    for r in records:
        blob = np.load(r.artifacts["snapshots"])
        its = [int(i) for i in blob["iterations"]]
        chosen = [i for i in iterations if i in its]
        imgs = [blob["ground_truth"][0]] + [blob["snapshots"][its.index(i)][0] for i in chosen]
        rows.append((r, ["truth"] + [str(i) for i in chosen], imgs))
    ncol = max(len(imgs) for _, _, imgs in rows)
    fig, axes = plt.subplots(len(rows), ncol, figsize=(1.3 * ncol, 1.4 * len(rows)), squeeze=False)
    for (r, titles, imgs), row_axes in zip(rows, axes):
        for ax in row_axes:
            ax.axis("off")
        for ax, title, img in zip(row_axes, titles, imgs):
            ax.imshow(np.clip(img.transpose(1, 2, 0), 0, 1), interpolation="nearest")
            ax.set_title(title, fontsize=7)
        row_axes[0].text(-0.1, 0.5, f"{_label(r.cell)} s{r.seed}", fontsize=6, rotation=90,
                         transform=row_axes[0].transAxes, ha="right", va="center")
    fig.tight_layout()
    path = out_dir / f"{_stem(records, ReportKind.SNAPSHOT_GRID)}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


RENDERERS = {
    ReportKind.TABLE: table,
    ReportKind.ROC_PLOT: roc_plot,
    ReportKind.LADDER_PLOT: ladder_plot,
    ReportKind.SWEEP_PLOT: sweep_plot,
    ReportKind.SNAPSHOT_GRID: snapshot_grid,
}


def report(records: list[ResultRecord], kind, out_dir: str | Path) -> list[Path]:
    kind = ReportKind(kind)
    _check(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return RENDERERS[kind](records, out_dir)


def summarize(records: list[ResultRecord], metric: str) -> dict[str, float]:
    """Median of ``metric`` per cell, keyed by the cell's JSON."""
    groups: dict[str, list] = {}
    for r in records:
        if r.ok and metric in r.metrics:
            groups.setdefault(json.dumps(r.cell, sort_keys=True), []).append(r.metrics[metric])
    return {k: median(v) for k, v in groups.items()}
