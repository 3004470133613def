"""
Raster plots of a finished run: PCA view of real vs generated frames, loss curves,
MI estimates and the attention rate.
"""
import logging
import os
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.dynamic_attention import AttentionSchedule, schedule_rate
from src.tensor_file import read_tensors
from src.trainer import PROJECTION_NAME, load_run_config, read_run_log

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["loss_d", "gan", "perc", "lip", "mi", "total"]
MI_COLUMNS = ["mi_estimator", "mi_generated"]


def rate_curve(schedule: AttentionSchedule, epochs) -> np.ndarray:
    return np.array([schedule_rate(schedule, float(epoch)) for epoch in epochs])


def plot_pca(real: np.ndarray, generated: np.ndarray, explained_variance: Optional[np.ndarray] = None):
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(real[:, 0], real[:, 1], s=8, alpha=0.6, label=f"real ({len(real)})")
    ax.scatter(generated[:, 0], generated[:, 1], s=8, alpha=0.6, label=f"generated ({len(generated)})")
    if explained_variance is not None and len(explained_variance) >= 2:
        ax.set_xlabel(f"PC1 (variance {explained_variance[0]:.3g})")
        ax.set_ylabel(f"PC2 (variance {explained_variance[1]:.3g})")
    ax.set_title("Held-out frames, PCA projection")
    ax.legend()
    return fig


def plot_losses(steps: pd.DataFrame):
    fig, ax = plt.subplots(figsize=(8, 4))
    for column in LOSS_COLUMNS:
        if column in steps and steps[column].notna().any():
            ax.plot(steps["step"], steps[column], label=column, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return fig


def plot_mi(steps: pd.DataFrame):
    fig, ax = plt.subplots(figsize=(8, 4))
    labels = {"mi_estimator": "estimator objective", "mi_generated": "estimate on generated pairs"}
    for column in MI_COLUMNS:
        if column in steps and steps[column].notna().any():
            ax.plot(steps["step"], steps[column], label=labels[column], linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("nats")
    ax.legend()
    return fig


def plot_attention_rate(schedule: AttentionSchedule, steps: pd.DataFrame, samples: int = 500):
    fig, ax = plt.subplots(figsize=(8, 4))
    epochs = np.linspace(0, schedule.total_epochs, samples, endpoint=False)
    ax.plot(epochs, rate_curve(schedule, epochs), label="schedule")
    if "rate" in steps and len(steps):
        ax.plot(steps["epoch"], steps["rate"], ".", markersize=2, label="training steps")
    ax.set_xlabel("epoch")
    ax.set_ylabel("attention rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return fig


def emit_plots(run_dir: str) -> List[str]:
    projection_path = os.path.join(run_dir, PROJECTION_NAME)
    if not os.path.isfile(projection_path):
        raise FileNotFoundError(f"No evaluation artifacts in {run_dir}, run eval first")
    projection = read_tensors(projection_path, ["real", "generated", "explained_variance"])
    steps = pd.DataFrame.from_records(read_run_log(run_dir, kind="step"))
    if steps.empty:
        raise FileNotFoundError(f"The run log in {run_dir} has no training steps")
    schedule = load_run_config(run_dir).schedule
    figures = {
        "pca.png": plot_pca(projection["real"], projection["generated"], projection["explained_variance"]),
        "losses.png": plot_losses(steps),
        "mi.png": plot_mi(steps),
        "attention_rate.png": plot_attention_rate(schedule, steps),
    }
    paths = []
    for name, fig in figures.items():
        path = os.path.join(run_dir, name)
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    logger.debug(f"Wrote {len(paths)} plots to {run_dir}")
    return paths
