"""Figure rendering for CLI reports (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}
GT_COLOR = "0.15"
PRED_COLOR = "tab:red"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_order_parameters(times, gt=None, pred=None, path="order_parameters.png", title=None) -> Path:
    """``gt``/``pred`` are dicts {"delta_rho": trace, "delta_q": trace}; either may be None."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.0))
        for ax, name, label in zip(axes, ("delta_rho", "delta_q"), (r"$\Delta_\rho$", r"$\Delta_Q$")):
            if gt is not None:
                ax.plot(times[: len(gt[name])], gt[name], color=GT_COLOR, label="ground truth")
            if pred is not None:
                ax.plot(times[: len(pred[name])], pred[name], color=PRED_COLOR, ls="--", label="predicted")
            ax.set_ylabel(label)
        axes[-1].set_xlabel("time")
        axes[0].legend(frameon=False, fontsize=8)
        if title:
            axes[0].set_title(title)
        return _save(fig, path)


def plot_autocorrelation(report, path="autocorrelation.png") -> Path:
    tau = np.arange(report.tau_max + 1) * report.stride
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, sharey=True, figsize=(8.0, 3.4))
        for ax, name, label in zip(axes, ("delta_rho", "delta_q"), (r"$\Delta_\rho$", r"$\Delta_Q$")):
            ax.plot(tau, report.a_gt[name], color=GT_COLOR, label="ground truth")
            if name in report.a_pred:
                ax.plot(tau, report.a_pred[name], color=PRED_COLOR, ls="--", label="predicted")
            ax.axhline(0, color="0.7", lw=0.6)
            ax.set_title(label)
            ax.set_xlabel(r"$\tau$")
        axes[0].set_ylabel(r"$A(\tau)$")
        axes[0].legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_training(metrics, path="training.png") -> Path:
    steps = np.array([m["step"] for m in metrics])
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 4.8))
        if len(steps):
            loss = np.array([m["loss_total"] for m in metrics])
            ax.semilogy(steps, loss, color="0.6", lw=0.5)
            w = max(1, len(loss) // 100)
            if w > 1:
                smooth = np.convolve(loss, np.ones(w) / w, mode="valid")
                ax.semilogy(steps[w - 1 :], smooth, color=GT_COLOR)
            ax_lr.plot(steps, [m["lr"] for m in metrics], color="tab:blue")
            for s in np.flatnonzero(np.diff([m["stage"] for m in metrics])):
                ax.axvline(steps[s + 1], color="0.8", lw=0.6)
        ax.set_ylabel("loss")
        ax_lr.set_ylabel("learning rate")
        ax_lr.set_xlabel("optimizer step")
        return _save(fig, path)


def plot_errors(errors, path="rollout_error.png") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(1, len(errors) + 1), errors, color=PRED_COLOR, marker=".", ms=3)
        ax.set_xlabel("prediction step")
        ax.set_ylabel("normalised state error")
        return _save(fig, path)
