"""Report figures rendered next to the delimited output.

Two PNGs accompany the CSVs: the threshold curve with its phase
transition, and the pruning sweep with the predicted and measured
cutoffs. Rendering is headless (Agg) and writes no timestamps, so
figure bytes are reproducible run to run.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

CURVE_FIGURE = "threshold_curve.png"
SWEEP_FIGURE = "sweep.png"

_SAVE_KW = dict(dpi=150, metadata={"Software": "prunability"})


def _read_csv_columns(path: Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns: dict[str, list[float]] = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                columns[name].append(float(value))
    return columns


def render_curve_figure(curve_csv: Path, p_star: float, out_path: Path) -> None:
    """Threshold T(p) against the diagonal, with R(p) on a twin axis."""
    cols = _read_csv_columns(curve_csv)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(cols["p"], cols["T"], color="tab:blue", label="threshold T(p)")
    ax.plot(cols["p"], cols["p"], color="gray", linestyle=":", label="T = p")
    ax.axvline(p_star, color="tab:red", linestyle="--", label=f"p* = {p_star:.3f}")
    ax.set_xlabel("pruning ratio p")
    ax.set_ylabel("threshold T(p)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)

    twin = ax.twinx()
    twin.plot(cols["p"], cols["R"], color="tab:green", alpha=0.6, label="R(p)")
    twin.set_ylabel("projection distance R(p)")

    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = twin.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="center left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)


def render_sweep_figure(
    sweep_csv: Path, p_star: float, empirical_max_p: float, out_path: Path
) -> None:
    """Accuracy and (normalized) loss against the pruning ratio."""
    cols = _read_csv_columns(sweep_csv)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(cols["p"], cols["train_acc"], color="tab:blue", label="train accuracy")
    ax.plot(cols["p"], cols["test_acc"], color="tab:orange", label="test accuracy")

    max_loss = max(max(cols["train_loss"]), max(cols["test_loss"]), 1e-300)
    ax.plot(
        cols["p"],
        [v / max_loss for v in cols["train_loss"]],
        color="tab:blue",
        linestyle=":",
        alpha=0.7,
        label="train loss (normalized)",
    )
    ax.plot(
        cols["p"],
        [v / max_loss for v in cols["test_loss"]],
        color="tab:orange",
        linestyle=":",
        alpha=0.7,
        label="test loss (normalized)",
    )
    ax.axvline(p_star, color="tab:red", linestyle="--", label=f"predicted p* = {p_star:.3f}")
    ax.axvline(
        empirical_max_p,
        color="tab:green",
        linestyle="--",
        label=f"empirical max p = {empirical_max_p:.3f}",
    )
    ax.set_xlabel("pruning ratio p")
    ax.set_ylabel("accuracy / normalized loss")
    ax.set_xlim(0, 1)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
