"""Delimited report tables and their companion matplotlib figures.

Every reporting command writes CSV first (the machine-readable artifact, byte
deterministic for a fixed seed) and renders a PNG next to it. Metric tables
follow the five-column layout model, HD(mm), DSC, SN, SP, ASD(mm).
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport
from .train import AblationResult, EpochStats

TABLE_COLUMNS = ["HD(mm)", "DSC", "SN", "SP", "ASD(mm)"]
_METRIC_KEYS = ["hd_mm", "dsc", "sn", "sp", "asd_mm"]  # table column order


def _fmt(value, digits=4) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "undefined"
    return f"{value:.{digits}f}"


# ---------------------------------------------------------------------------
# Training history


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "train_bce", "train_dice_term",
                    "train_l2", "val_dsc"])
        for row in history:
            w.writerow([row.epoch, f"{row.train_loss:.6f}", f"{row.train_bce:.6f}",
                        f"{row.train_dice_term:.6f}", f"{row.train_l2:.6f}",
                        f"{row.val_dsc:.6f}"])


def save_history_figure(path, history: list[EpochStats]) -> None:
    epochs = [r.epoch for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [r.train_loss for r in history], label="total")
    ax1.plot(epochs, [r.train_bce for r in history], label="bce")
    ax1.plot(epochs, [r.train_dice_term for r in history], label="dice term")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r.val_dsc for r in history], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation DSC")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Per-run evaluation


def write_per_image_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + TABLE_COLUMNS)
        for r in report.rows:
            w.writerow([r.image_id, _fmt(r.hd_mm), _fmt(r.dsc), _fmt(r.sn),
                        _fmt(r.sp), _fmt(r.asd_mm)])


def write_summary_csv(path, reports: list[MetricsReport]) -> None:
    """One fold-level row per model in the five-metric table layout."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model"] + TABLE_COLUMNS)
        for report in reports:
            agg = report.aggregate()
            w.writerow([report.model] + [_fmt(agg[f"{k}_mean"]) for k in _METRIC_KEYS])


def write_aggregate_csv(path, report: MetricsReport) -> None:
    """Means, standard deviations, and undefined-case counts for one model."""
    agg = report.aggregate()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["statistic"] + TABLE_COLUMNS)
        w.writerow(["mean"] + [_fmt(agg[f"{k}_mean"]) for k in _METRIC_KEYS])
        w.writerow(["std"] + [_fmt(agg[f"{k}_std"]) for k in _METRIC_KEYS])
        w.writerow(["undefined", agg["n_undefined_hd"], "", "", "",
                    agg["n_undefined_asd"]])


def save_metrics_figure(path, report: MetricsReport) -> None:
    idx = np.arange(len(report.rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for attr, color in (("dsc", "tab:blue"), ("sn", "tab:orange"), ("sp", "tab:green")):
        ax1.plot(idx, [getattr(r, attr) for r in report.rows], marker="o",
                 ms=3, lw=0.8, label=attr.upper(), color=color)
    ax1.set_xlabel("image")
    ax1.set_ylim(0, 1.05)
    ax1.legend(fontsize=8)
    ax1.set_title(f"{report.model}: overlap metrics")
    for attr, color in (("hd_mm", "tab:red"), ("asd_mm", "tab:purple")):
        vals = [getattr(r, attr) if getattr(r, attr) is not None else np.nan
                for r in report.rows]
        ax2.plot(idx, vals, marker="o", ms=3, lw=0.8,
                 label=attr.replace("_mm", "").upper() + " (mm)", color=color)
    ax2.set_xlabel("image")
    ax2.legend(fontsize=8)
    ax2.set_title("surface distances")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Ablation comparison


def write_comparison_csv(path, result: AblationResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model"] + TABLE_COLUMNS)
        for row in result.rows:
            w.writerow([row["model"]] + [_fmt(row[k]) for k in _METRIC_KEYS])


def write_fold_series_csv(out_dir, result: AblationResult) -> list:
    """One CSV per metric: rows are models, columns are folds."""
    paths = []
    n_folds = result.series["dsc"].shape[1]
    for metric, values in result.series.items():
        path = out_dir / f"folds_{metric}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model"] + [f"fold_{j}" for j in range(n_folds)])
            for label, row in zip(result.labels, values):
                w.writerow([label] + [_fmt(v) for v in row])
        paths.append(path)
    return paths


def save_fold_series_figure(path, result: AblationResult) -> None:
    """Per-fold DSC/SN/SP series, one line per model."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4), sharex=True)
    n_folds = result.series["dsc"].shape[1]
    folds = np.arange(n_folds)
    for ax, metric in zip(axes, ("dsc", "sn", "sp")):
        for label, row in zip(result.labels, result.series[metric]):
            ax.plot(folds, row, marker="o", ms=3, label=label)
        ax.set_title(metric.upper())
        ax.set_xlabel("fold")
        ax.set_xticks(folds)
        ax.set_ylim(0, 1.05)
    axes[0].set_ylabel("score")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
