from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import numpy as np
import pandas as pd
import seaborn as sns
from matplotlib import pyplot as plt


def plot_grid_heatmap(grid: pd.DataFrame, output_path: str, title: str = ""):
    """Success rate per (incline, radius) cell."""
    table = grid.pivot(index="incline_deg", columns="radius_m", values="success").sort_index(ascending=False)
    sns.set(style="white")
    plt.figure(figsize=(6, 4.5))
    sns.heatmap(table, annot=True, fmt=".2f", vmin=0.0, vmax=1.0, cmap="viridis",
                cbar_kws={"label": "success rate"})
    plt.xlabel("rung radius (m)")
    plt.ylabel("incline (deg)")
    if title:
        plt.title(title)
    plt.tight_layout()
    plt.savefig(output_path, format="svg")
    plt.close()


def plot_trajectory_overlay(runs: Sequence[pd.DataFrame], labels: Sequence[str], output_path: str,
                            rmse: Optional[tuple[float, float]] = None):
    """Base x, z and pitch over time for two (or more) logged runs."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    for run, label in zip(runs, labels):
        for ax, column in zip(axes, ("base_x", "base_z", "pitch")):
            ax.plot(run["t"], run[column], label=label)
    for ax, name in zip(axes, ("x (m)", "z (m)", "pitch (rad)")):
        ax.set_ylabel(name)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("time (s)")
    axes[0].legend()
    if rmse is not None:
        axes[0].set_title(f"position RMSE {rmse[0]:.3f} m, pitch RMSE {rmse[1]:.3f} rad")
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)


def plot_training_curves(metrics: pd.DataFrame, output_path: str, columns: Sequence[str] = ("return", "goal_rate",
                                                                                             "level_mean")):
    columns = [c for c in columns if c in metrics.columns]
    if not columns:
        return
    sns.set(style="whitegrid")
    fig, axes = plt.subplots(len(columns), 1, figsize=(10, 2.5 * len(columns)), sharex=True, squeeze=False)
    for ax, column in zip(axes[:, 0], columns):
        values = metrics[column].to_numpy(dtype=float)
        ax.plot(metrics["iter"], values, alpha=0.35)
        window = max(1, min(50, len(values) // 10))
        ax.plot(metrics["iter"], pd.Series(values).rolling(window, min_periods=1).mean(), label=f"{column} (smoothed)")
        ax.set_ylabel(column)
        ax.legend(loc="best")
    axes[-1, 0].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    return pd.Series(np.asarray(values, dtype=float)).rolling(window, min_periods=1).mean().to_numpy()
