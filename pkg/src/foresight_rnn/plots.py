"""Figure rendering for the CLI's report paths.

Every plotting helper takes already-parsed data, writes one PNG next to the
corresponding CSV, and returns the path.  The Agg backend is forced so the
functions work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

DOOR_COLORS = {"push": "tab:blue", "pull": "tab:orange", "slide": "tab:green"}


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(rows, path):
    """Training-loss curves from MetricsRow records."""
    epochs = [r.epoch for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r.loss_total for r in rows], label="total", lw=1.5)
    for name in rows[0].loss_per_modality:
        ax.plot(epochs, [r.loss_per_modality[name] for r in rows],
                label=name, lw=1.0, alpha=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative log likelihood")
    ax.set_title("training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_success_table(table, path, trials_per_type: int = 10):
    """Stacked per-type success counts across checkpoints.

    table: list of (epoch, {door_type: successes}).
    """
    epochs = [epoch for epoch, _ in table]
    fig, ax = plt.subplots(figsize=(7, 4))
    bottom = np.zeros(len(table))
    width = (0.8 * (epochs[1] - epochs[0])) if len(epochs) > 1 else 50
    for door_type, color in DOOR_COLORS.items():
        values = np.array([counts.get(door_type, 0) for _, counts in table])
        ax.bar(epochs, values, bottom=bottom, width=width,
               color=color, label=door_type)
        bottom += values
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"successes (of {trials_per_type} per type)")
    ax.set_title("door-opening successes by checkpoint")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    return _finish(fig, path)


def plot_lyapunov(estimates, path):
    """Finite-time exponent along an episode, with the zero line marked."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([e.timestep for e in estimates], [e.exponent for e in estimates],
            lw=1.2)
    ax.axhline(0.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("timestep")
    ax.set_ylabel("lambda (nats/step)")
    ax.set_title("finite-time Lyapunov exponent of the simulated future")
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_pca(export, path):
    """Shared-state trajectories in the PCA plane.

    Offline (teacher-forced) trajectories are dotted, online episodes solid;
    color encodes door type.
    """
    by_traj = {}
    for source, door_type, t, proj in export.rows:
        by_traj.setdefault((source, door_type), []).append(proj)
    fig, ax = plt.subplots(figsize=(6, 6))
    seen_labels = set()
    for (source, door_type), points in by_traj.items():
        points = np.asarray(points)
        online = source.startswith("online")
        label = f"{door_type} ({'online' if online else 'offline'})"
        ax.plot(points[:, 0], points[:, 1],
                ls="-" if online else ":",
                lw=1.6 if online else 1.0,
                color=DOOR_COLORS.get(door_type, "tab:gray"),
                label=None if label in seen_labels else label)
        seen_labels.add(label)
        ax.plot(points[0, 0], points[0, 1], marker="o", ms=4,
                color=DOOR_COLORS.get(door_type, "tab:gray"))
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title("shared hidden state, PCA plane")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_variance_trace(times, mean_var: dict, sigma, path):
    """Mean predicted variance per modality, with sigma on a twin axis when
    the episode logged foresight diagnostics."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, values in mean_var.items():
        ax.plot(times, values, label=f"mean var ({name})", lw=1.2)
    ax.set_xlabel("timestep")
    ax.set_ylabel("mean predicted variance")
    ax.grid(alpha=0.3)
    if sigma is not None:
        twin = ax.twinx()
        twin.plot(times, sigma, color="tab:red", lw=1.0, ls="--", label="sigma")
        twin.set_ylabel("noise intensity sigma")
        twin.set_ylim(0.0, 0.2)
        lines, labels = ax.get_legend_handles_labels()
        tlines, tlabels = twin.get_legend_handles_labels()
        ax.legend(lines + tlines, labels + tlabels, fontsize=8)
    else:
        ax.legend(fontsize=8)
    ax.set_title("predicted variance and noise intensity")
    return _finish(fig, path)
