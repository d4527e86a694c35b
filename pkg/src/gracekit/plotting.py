"""Figures written next to the CLI's CSV outputs (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib as mpl  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style():
    mpl.rc("figure", figsize=(6.4, 4.2), dpi=100)
    mpl.rc("font", size=10)
    mpl.rc("axes", linewidth=1.2, grid=True)
    mpl.rc("axes.spines", top=False, right=False)
    mpl.rc("grid", alpha=0.3, linestyle=":")
    mpl.rc("lines", linewidth=1.6)
    mpl.rc("savefig", bbox="tight")


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(report, path) -> Path:
    """Held-out accuracy and CE per epoch, plus beta when the run has one."""
    _style()
    rows = report.rows
    epochs = [r.epoch for r in rows]
    fig, (ax_acc, ax_ce) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    ax_acc.plot(epochs, [r.eval_acc for r in rows], marker="o", color="tab:blue")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("held-out accuracy")
    ax_ce.plot(epochs, [r.eval_ce for r in rows], marker="o", color="tab:red", label="held-out CE")
    ax_ce.plot(epochs, [r.train_loss for r in rows], ls="--", color="tab:gray", label="train loss")
    ax_ce.set_xlabel("epoch")
    ax_ce.legend(frameon=False)
    if report.beta_trajectory:
        ax_b = ax_ce.twinx()
        steps = np.linspace(0, max(epochs, default=1), len(report.beta_trajectory))
        ax_b.plot(steps, report.beta_trajectory, color="tab:green", lw=1.0, alpha=0.7)
        ax_b.set_ylabel("beta", color="tab:green")
        ax_b.grid(False)
    fig.suptitle(f"{report.variant}  (seed {report.config.seed}, bits {report.config.bits})")
    return _save(fig, path)


def plot_entropy_error(result, path) -> Path:
    _style()
    x = np.array([b.mean_entropy for b in result.bins])
    y = result.error_rates
    fig, ax = plt.subplots()
    ax.plot(x, y, "o", color="tab:blue", label="bin error rate")
    if x.var() > 0:
        slope, intercept = np.polyfit(x, y, 1)
        grid = np.linspace(x.min(), x.max(), 50)
        ax.plot(grid, slope * grid + intercept, color="tab:orange",
                label=f"linear fit, R² = {result.binned_r2:.3f}")
    ax.set_xlabel("normalized teacher entropy (bin mean)")
    ax.set_ylabel("teacher error rate")
    ax.set_title(f"Pearson r = {result.pearson_r:.3f}  (n = {result.n_samples})")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_controller(traj, tau: float, path) -> Path:
    _style()
    fig, (ax_b, ax_l) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.0))
    ax_b.plot(traj.step, traj.beta, color="tab:green")
    ax_b.set_ylabel("beta")
    ax_l.plot(traj.step, traj.raw_loss, color="tab:gray", lw=0.5, alpha=0.4, label="observed")
    ax_l.plot(traj.step, traj.ema_loss, color="tab:blue", label="EMA")
    ax_l.axhline(tau, color="tab:red", ls="--", label="tau")
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("distillation loss")
    ax_l.legend(frameon=False, loc="upper right")
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    _style()
    fig, ax = plt.subplots()
    names = [r["impl"] for r in rows]
    ax.bar(names, [r["bytes"] / 1024 for r in rows], color=["tab:gray", "tab:blue", "tab:green"][:len(rows)])
    ax.set_ylabel("weight storage (KiB)")
    ax.grid(axis="x", visible=False)
    return _save(fig, path)
