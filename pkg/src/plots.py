"""SVG diagnostics for the report command."""
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed id salt and no date stamp: identical inputs give byte-identical SVG files
plt.rcParams["svg.hashsalt"] = "nbeats-s"
plt.rcParams["svg.fonttype"] = "path"
SVG_METADATA = {"Date": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_lambda_trajectory(trajectories, path):
    """One lambda line (or scatter for noisy policies) per run."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for label, frame in trajectories.items():
        lam = frame["lambda"].to_numpy()
        if np.ptp(lam) > 0 and np.std(np.diff(lam)) > 0.05:
            ax.scatter(frame["iteration"], lam, s=2, alpha=0.4, label=label)
        else:
            ax.plot(frame["iteration"], lam, linewidth=1.2, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("lambda (instability weight)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("Loss weight over training")
    return _save(fig, path)


def plot_cosine_similarity(trajectories, path, window=50):
    """Rolling mean of the task-gradient cosine similarity per run."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for label, frame in trajectories.items():
        cosine = frame["cosine_similarity"].rolling(window, min_periods=1).mean()
        ax.plot(frame["iteration"], cosine, linewidth=1.2, label=label)
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"cosine similarity (rolling mean, {window})")
    ax.set_ylim(-1.02, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title("Agreement of accuracy and instability gradients")
    return _save(fig, path)


def plot_kappa_sweep(frame, path):
    """Validation sMAPE and sMAPC against the TARW cap kappa."""
    frame = frame.sort_values("kappa")
    fig, (ax_error, ax_stability) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_error.plot(frame["kappa"], frame["validation_smape"], marker="o")
    ax_error.set_xlabel("kappa")
    ax_error.set_ylabel("validation sMAPE")
    ax_stability.plot(frame["kappa"], frame["validation_smapc"], marker="o", color="tab:orange")
    ax_stability.set_xlabel("kappa")
    ax_stability.set_ylabel("validation sMAPC")
    fig.tight_layout()
    return _save(fig, path)


def plot_mcb(result, path, title="MCB"):
    """Average rank dot and interval per method; the best method's interval band is shaded."""
    order = np.argsort(result.average_ranks)
    methods = [result.methods[i] for i in order]
    ranks = result.average_ranks[order]

    fig, ax = plt.subplots(figsize=(6, 0.45 * len(methods) + 1.2))
    ax.axvspan(ranks[0] - result.half_width, ranks[0] + result.half_width, color="0.85")
    y = np.arange(len(methods))
    ax.errorbar(ranks, y, xerr=result.half_width, fmt="o", color="black", capsize=3)
    ax.set_yticks(y)
    ax.set_yticklabels(methods)
    ax.invert_yaxis()
    ax.set_xlabel("average rank")
    ax.set_title(f"{title} (alpha={result.alpha}, N={result.num_series})")
    fig.tight_layout()
    return _save(fig, path)
