"""Report rendering: delimited outputs plus matplotlib figures saved next
to them. Every CLI report path emits both."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .training import EvalResult, RoutingReport


def save_training_curves(history: list[dict], path) -> None:
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [r["l2re"] for r in history], label="l2re")
    ax1.plot(epochs, [r["total"] for r in history], label="total")
    ax1.set_xlabel("epoch")
    ax1.set_yscale("log")
    ax1.legend()
    ax1.set_title("training loss")
    ax2.plot(epochs, [r["aux_image"] for r in history], label="image balance")
    ax2.plot(epochs, [r["aux_token"] for r in history], label="token balance")
    ax2.set_xlabel("epoch")
    ax2.legend()
    ax2.set_title("balance losses")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_eval_csv(result: EvalResult, path) -> None:
    lines = ["metric,step,model,persistence"]
    lines.append(f"one_step,1,{result.one_step:.10g},{result.persistence:.10g}")
    for i, (m, p) in enumerate(zip(result.rollout, result.rollout_persistence), start=1):
        lines.append(f"rollout,{i},{m:.10g},{p:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_rollout_plot(result: EvalResult, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    if result.rollout:
        steps = np.arange(1, len(result.rollout) + 1)
        ax.plot(steps, result.rollout, "o-", label="model")
        ax.plot(steps, result.rollout_persistence, "s--", label="persistence")
    else:
        ax.bar(["model", "persistence"], [result.one_step, result.persistence])
    ax.set_xlabel("rollout step")
    ax.set_ylabel("relative L2 error")
    ax.legend() if result.rollout else None
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_routing_csv(report: RoutingReport, path) -> None:
    n_exp = len(next(iter(report.percentages.values())))
    header = "family," + ",".join(f"expert_{i}" for i in range(n_exp))
    lines = [header]
    for fam in report.families:
        row = ",".join(f"{v:.4f}" for v in report.percentages[fam])
        lines.append(f"{fam},{row}")
    lines.append("")
    lines.append("family_a,family_b,total_variation")
    for (f1, f2), d in sorted(report.tv.items()):
        lines.append(f"{f1},{f2},{d:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_routing_figure(report: RoutingReport, path) -> None:
    n_exp = len(next(iter(report.percentages.values())))
    x = np.arange(n_exp)
    width = 0.8 / max(len(report.families), 1)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for i, fam in enumerate(report.families):
        ax.bar(x + i * width, report.percentages[fam], width, label=fam)
    ax.set_xticks(x + width * (len(report.families) - 1) / 2)
    ax.set_xticklabels([f"expert {i}" for i in range(n_exp)])
    ax.set_ylabel("activation share (%)")
    tv_text = "  ".join(f"TV({a},{b})={d:.2f}" for (a, b), d in sorted(report.tv.items()))
    ax.set_title(tv_text, fontsize=9)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_frame_montage(truth: np.ndarray, pred: np.ndarray, path, channel: int = 0) -> None:
    """Rows: ground truth, prediction, absolute error; columns are steps."""
    steps = truth.shape[0]
    fig, axes = plt.subplots(3, steps, figsize=(1.8 * steps, 5.4), squeeze=False)
    vmin = min(truth.min(), pred.min())
    vmax = max(truth.max(), pred.max())
    for s in range(steps):
        axes[0][s].imshow(truth[s, channel], vmin=vmin, vmax=vmax)
        axes[1][s].imshow(pred[s, channel], vmin=vmin, vmax=vmax)
        axes[2][s].imshow(np.abs(pred[s, channel] - truth[s, channel]))
        for r in range(3):
            axes[r][s].set_xticks([])
            axes[r][s].set_yticks([])
        axes[0][s].set_title(f"step {s + 1}", fontsize=8)
    for r, label in enumerate(["truth", "prediction", "|error|"]):
        axes[r][0].set_ylabel(label, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
