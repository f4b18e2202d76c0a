"""Delimited outputs and the figures rendered next to them.

Every artifact is written twice: a CSV table (the machine-readable record)
and, via the `report` command, a PNG figure rendered from that table.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport

METRIC_COLUMNS = ("precision", "recall", "f1", "f2", "auc")


def write_rows_csv(rows: list[dict], path: str | Path,
                   fieldnames: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_rows_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics_outputs(report: MetricsReport, out_dir: str | Path) -> dict:
    """report.json + metrics.csv for one evaluation run."""
    out_dir = Path(out_dir)
    paths = {
        "report": report.save(out_dir / "report.json"),
        "metrics_csv": write_rows_csv(report.rows(), out_dir / "metrics.csv"),
    }
    return paths


def write_history_csv(history: dict, path: str | Path) -> Path:
    keys = list(history.keys())
    n = len(history[keys[0]]) if keys else 0
    rows = [{k: history[k][i] for k in keys} for i in range(n)]
    return write_rows_csv(rows, path, fieldnames=keys)


def plot_metrics(report: MetricsReport, path: str | Path) -> Path:
    """Grouped bars: one panel per level, metric bars per ratio."""
    ratios = list(report.results.keys())
    levels = [lv for lv in ("channel", "region", "patient")
              if any(lv in report.results[r] for r in ratios)]
    fig, axes = plt.subplots(1, len(levels), figsize=(4.2 * len(levels), 3.4),
                             sharey=True, squeeze=False)
    width = 0.8 / len(METRIC_COLUMNS)
    x = np.arange(len(ratios))
    for ax, level in zip(axes[0], levels):
        for i, metric in enumerate(METRIC_COLUMNS):
            vals = [getattr(report.results[r][level], metric)
                    if level in report.results[r] else np.nan for r in ratios]
            ax.bar(x + (i - 2) * width, vals, width, label=metric)
        ax.set_title(f"{level} level")
        ax.set_xticks(x)
        ax.set_xticklabels(ratios)
        ax.set_xlabel("positive:negative ratio")
        ax.set_ylim(0, 105)
    axes[0][0].set_ylabel("percent")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_training_curve(history_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax1 = plt.subplots(figsize=(6, 3.4))
    xs = [float(r.get("epoch", r.get("step", i)))
          for i, r in enumerate(history_rows)]
    loss_key = "train_loss" if "train_loss" in (history_rows[0] if history_rows else {}) else None
    if loss_key:
        ax1.plot(xs, [_float_or_nan(r[loss_key]) for r in history_rows],
                 color="tab:blue", label="train loss")
        ax1.set_ylabel("loss", color="tab:blue")
    ax1.set_xlabel("epoch/step")
    if history_rows and "val_f2" in history_rows[0]:
        ax2 = ax1.twinx()
        ax2.plot(xs, [_float_or_nan(r["val_f2"]) for r in history_rows],
                 color="tab:red", label="val F2")
        ax2.set_ylabel("validation F2", color="tab:red")
    elif history_rows and "val_loss" in history_rows[0]:
        ax1.plot(xs, [_float_or_nan(r["val_loss"]) for r in history_rows],
                 color="tab:red", label="val loss")
        ax1.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _float_or_nan(value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float("nan")


def plot_sweep(sweep_rows: list[dict], path: str | Path,
               value_column: str = "channel_f2") -> Path:
    """Heatmap of a metric over the inner x cross threshold grid."""
    inner = sorted({float(r["inner_threshold"]) for r in sweep_rows})
    cross = sorted({float(r["cross_threshold"]) for r in sweep_rows})
    grid = np.full((len(inner), len(cross)), np.nan)
    for r in sweep_rows:
        i = inner.index(float(r["inner_threshold"]))
        j = cross.index(float(r["cross_threshold"]))
        grid[i, j] = _float_or_nan(r[value_column])
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(cross)))
    ax.set_xticklabels([f"{c:g}" for c in cross])
    ax.set_yticks(range(len(inner)))
    ax.set_yticklabels([f"{c:g}" for c in inner])
    ax.set_xlabel("cross-time threshold")
    ax.set_ylabel("inner-time threshold")
    ax.set_title(value_column)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_edge_weights(rows: list[dict], path: str | Path) -> Path:
    """Mean learned cross-time edge weight per step, planted vs non-planted."""
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, [_float_or_nan(r["mean_weight_planted"]) for r in rows],
            marker="o", label="planted edges")
    ax.plot(steps, [_float_or_nan(r["mean_weight_other"]) for r in rows],
            marker="s", label="non-planted pairs")
    if rows and "event_active" in rows[0]:
        active = [i for i, r in enumerate(rows) if r["event_active"] in ("1", "True", True, 1)]
        for i in active:
            ax.axvspan(steps[i] - 0.5, steps[i] + 0.5, color="tab:orange", alpha=0.15)
    ax.set_xlabel("segment index")
    ax.set_ylabel("mean edge weight")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_run(run_dir: str | Path) -> list[Path]:
    """Render figures for every known table found under run_dir."""
    run_dir = Path(run_dir)
    rendered = []
    report_path = run_dir / "report.json"
    if report_path.exists():
        report = MetricsReport.from_dict(json.loads(report_path.read_text()))
        rendered.append(plot_metrics(report, run_dir / "metrics.png"))
    for name, plotter in (("curve.csv", plot_training_curve),
                          ("pretrain_curve.csv", plot_training_curve)):
        table = run_dir / name
        if table.exists():
            rows = read_rows_csv(table)
            if rows:
                rendered.append(plotter(rows, table.with_suffix(".png")))
    sweep = run_dir / "sweep.csv"
    if sweep.exists():
        rows = read_rows_csv(sweep)
        if rows:
            rendered.append(plot_sweep(rows, run_dir / "sweep.png"))
    edge = run_dir / "edge_weights.csv"
    if edge.exists():
        rows = read_rows_csv(edge)
        if rows:
            rendered.append(plot_edge_weights(rows, run_dir / "edge_weights.png"))
    return rendered
