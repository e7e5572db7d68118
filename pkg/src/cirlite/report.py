"""Metric reports: a JSON report, CSV tables, and rendered figures.

Every report lands in one directory: `metrics.json` is the canonical
machine-readable result (sorted keys, so identical metrics hash identically),
the CSVs hold the same numbers in delimited form, and the PNGs are rendered
with the Agg backend so reports work on headless machines.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import Metrics  # noqa: E402


def metrics_payload(metrics: Metrics) -> dict:
    return {
        "recall_at_k": {str(k): metrics.recall_at_k[k]
                        for k in sorted(metrics.recall_at_k)},
        "step_losses": list(metrics.step_losses),
        "epoch_losses": list(metrics.epoch_losses),
    }


def write_report(out_dir, metrics: Metrics, lr_curve: list[float] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    payload = metrics_payload(metrics)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")
    written.append(json_path)

    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(["metric", "value"])
        for k in sorted(metrics.recall_at_k):
            writer.writerow([f"recall_at_{k}", f"{metrics.recall_at_k[k]:.6f}"])
        if metrics.step_losses:
            writer.writerow(["final_step_loss", f"{metrics.step_losses[-1]:.6f}"])
    written.append(csv_path)

    written.append(_recall_figure(out / "recall_bars.png", metrics.recall_at_k))

    if metrics.step_losses:
        curve_path = out / "loss_curve.csv"
        with open(curve_path, "w", newline="", encoding="utf-8") as stream:
            writer = csv.writer(stream)
            header = ["step", "loss"] + (["lr"] if lr_curve else [])
            writer.writerow(header)
            for i, loss in enumerate(metrics.step_losses):
                row = [i, f"{loss:.6f}"]
                if lr_curve:
                    row.append(f"{lr_curve[i]:.8f}")
                writer.writerow(row)
        written.append(curve_path)
        written.append(_loss_figure(out / "loss_curve.png", metrics.step_losses,
                                    metrics.epoch_losses))
    return written


def _recall_figure(path: Path, recalls: dict[int, float]) -> Path:
    ks = sorted(recalls)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bars = ax.bar([f"R@{k}" for k in ks], [recalls[k] for k in ks], color="#3b6ea5")
    ax.bar_label(bars, fmt="%.3f", padding=2)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("recall")
    ax.set_title("Retrieval recall")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _loss_figure(path: Path, step_losses: list[float],
                 epoch_losses: list[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(range(len(step_losses)), step_losses, lw=0.8, alpha=0.6, label="step loss")
    if epoch_losses:
        steps_per_epoch = len(step_losses) / len(epoch_losses)
        centers = [(e + 0.5) * steps_per_epoch for e in range(len(epoch_losses))]
        ax.plot(centers, epoch_losses, "o-", ms=3, color="#b0413e", label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
