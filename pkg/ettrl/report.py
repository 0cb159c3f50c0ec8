"""
Run diagnostics
---------------
Per-episode training curves and the positive-advantage vs majority-ratio
scatter for a finished run directory.
"""
from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from errors import InvalidArgument, LoadFailure  # noqa: E402
from harness import METRICS_FILE, read_metrics  # noqa: E402

logger = logging.getLogger(__name__)

sns.set_theme(style="whitegrid", palette="muted")
plt.rcParams["figure.dpi"] = 100
plt.rcParams["savefig.dpi"] = 300
plt.rcParams["savefig.bbox"] = "tight"

CURVES = {
    "majority_ratio_mean": "Majority ratio",
    "label_accuracy": "Label accuracy",
    "pass_at_1": "pass@1 (greedy)",
    "mean_response_entropy": "Mean response entropy (nats)",
    "mean_positive_advantage": "Mean positive advantage",
    "measured_token_ratio": "Token consumption ratio",
}


# --------------------
# Loading
# --------------------
def load_run(run_dir: str | Path) -> pd.DataFrame:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise LoadFailure(f"no {METRICS_FILE} in {run_dir}")
    frame = pd.DataFrame([m.model_dump() for m in read_metrics(path)])
    if frame.empty:
        raise InvalidArgument(f"{path} holds no episodes")
    return frame


# --------------------
# Figures
# --------------------
def plot_curves(frame: pd.DataFrame, output_path: Path) -> Path:
    fig, axes = plt.subplots(2, 3, figsize=(15, 8), sharex=True)
    for ax, (column, title) in zip(axes.flat, CURVES.items()):
        sns.lineplot(data=frame, x="episode", y=column, marker="o", ax=ax)
        ax.set_title(title)
        ax.set_ylabel("")
    plt.tight_layout()
    target = output_path / "training_curves.png"
    plt.savefig(target)
    plt.close(fig)
    return target


def plot_advantage_law(frame: pd.DataFrame, output_path: Path) -> Path:
    """Observed positive advantage against the closed form sqrt((1-p)/p)."""
    fig, ax = plt.subplots(figsize=(8, 6))
    observed = frame[(frame["mean_positive_advantage"] > 0) & (frame["majority_ratio_mean"] > 0)]
    if not observed.empty:
        sns.scatterplot(data=observed, x="majority_ratio_mean", y="mean_positive_advantage", hue="episode", palette="viridis", ax=ax)
    p = np.linspace(0.05, 0.95, 200)
    ax.plot(p, np.sqrt((1.0 - p) / p), color="black", linestyle="--", label="sqrt((1-p)/p)")
    ax.set_xlabel("Majority ratio p")
    ax.set_ylabel("Advantage of positive responses")
    ax.set_xlim(0.0, 1.0)
    ax.legend()
    plt.tight_layout()
    target = output_path / "advantage_vs_majority.png"
    plt.savefig(target)
    plt.close(fig)
    return target


def render_run(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    frame = load_run(run_dir)
    output_path = Path(out_dir)
    output_path.mkdir(parents=True, exist_ok=True)
    written = [plot_curves(frame, output_path), plot_advantage_law(frame, output_path)]
    frame.to_csv(output_path / "metrics.csv", index=False)
    written.append(output_path / "metrics.csv")
    logger.info("rendered %d episodes from %s", len(frame), run_dir)
    return written
