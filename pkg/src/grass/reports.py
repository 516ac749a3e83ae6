"""Figure rendering for training logs and rewiring statistics.

Figures land next to the delimited files they illustrate, so every CSV a
command writes has a matching PNG from the same run.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

from .errors import DataError


def read_metrics(metrics_path) -> dict:
    """Parse metrics.csv into per-split column arrays."""
    try:
        with open(metrics_path, newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as exc:
        raise DataError(f"cannot read metric log {metrics_path}: {exc}") from exc
    splits: dict = {}
    for row in rows:
        split = splits.setdefault(
            row["split"], {"epoch": [], "loss": [], "metric": [], "lr": []}
        )
        split["epoch"].append(int(row["epoch"]))
        split["loss"].append(float(row["loss"]))
        split["metric"].append(float(row["metric"]))
        split["lr"].append(float(row["lr"]))
    return splits


def training_curves(metrics_path, out_path) -> Path:
    """Render loss and metric curves per split, with the lr schedule inset."""
    splits = read_metrics(metrics_path)
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
    for name, series in sorted(splits.items()):
        ax_loss.plot(series["epoch"], series["loss"], label=name)
        ax_metric.plot(series["epoch"], series["metric"], label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("metric")
    if splits:
        ax_loss.legend()
        ax_metric.legend()
        reference = next(iter(sorted(splits)))
        ax_lr = ax_loss.twinx()
        ax_lr.plot(
            splits[reference]["epoch"], splits[reference]["lr"],
            color="gray", alpha=0.4, linestyle="--",
        )
        ax_lr.set_ylabel("lr", color="gray")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def rewire_figures(rows: list[dict], out_csv_path) -> list[Path]:
    """Histogram spectral gaps and diameters beside the stats CSV.

    rows carry trial, simple, diameter, spectral_gap; infinite diameters
    (disconnected samples) are dropped from the histogram but counted in
    the title.
    """
    out_csv_path = Path(out_csv_path)
    stem = out_csv_path.with_suffix("")
    written = []

    gaps = [row["spectral_gap"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(gaps, bins=30, color="tab:blue", alpha=0.8)
    ax.set_xlabel("spectral gap")
    ax.set_ylabel("trials")
    simple_rate = sum(row["simple"] for row in rows) / max(len(rows), 1)
    ax.set_title(f"{len(rows)} trials, simple rate {simple_rate:.3f}")
    fig.tight_layout()
    gap_path = Path(f"{stem}_spectral_gap.png")
    fig.savefig(gap_path, dpi=120)
    plt.close(fig)
    written.append(gap_path)

    finite = [row["diameter"] for row in rows if math.isfinite(row["diameter"])]
    fig, ax = plt.subplots(figsize=(6, 4))
    if finite:
        low, high = int(min(finite)), int(max(finite))
        ax.hist(finite, bins=range(low, high + 2), color="tab:orange", alpha=0.8)
    ax.set_xlabel("diameter")
    ax.set_ylabel("trials")
    ax.set_title(
        f"{len(finite)} connected of {len(rows)} trials"
    )
    fig.tight_layout()
    diameter_path = Path(f"{stem}_diameter.png")
    fig.savefig(diameter_path, dpi=120)
    plt.close(fig)
    written.append(diameter_path)
    return written
