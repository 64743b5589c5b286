"""Dynamics analysis of trained models.

Three exports, all CSV: finite-time Lyapunov exponents of the closed-loop
simulation (sensitivity of the shared hidden state to perturbations),
PCA-compressed shared-state trajectories (offline teacher-forced replays
define the plane, online episodes are projected into it), and per-episode
variance/noise-intensity traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    FusedRollout,
    HiddenState,
    NetworkConfig,
    closed_loop_rollout,
    open_loop_rollout,
)
from .numerics import pca_fit, pca_project
from .rng import RngStream

# reported when a perturbation dies out completely (log of zero divergence)
LYAPUNOV_FLOOR = -20.0


@dataclass
class LyapunovEstimate:
    timestep: int
    exponent: float          # largest finite-time exponent, nats per step
    n_directions: int
    epsilon: float


def lyapunov_core(rollout_fn, h0: np.ndarray, T: int, epsilon: float = 1e-4,
                  k_dirs: int = 10, rng: RngStream | None = None) -> float:
    """Direction-averaged finite-time exponent of an arbitrary T-step map.

    rollout_fn maps a state vector to its image after T steps; for each of
    k random unit directions u, the exponent is ln(|f(h0 + eps u) - f(h0)| /
    eps) / T, floored at LYAPUNOV_FLOOR when the divergence underflows.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = rng or RngStream(0, ("lyapunov",))
    h0 = np.asarray(h0, dtype=np.float64)
    base = rollout_fn(h0)
    exponents = np.empty(k_dirs)
    for i in range(k_dirs):
        u = rng.normal(h0.shape[0])
        u /= np.linalg.norm(u)
        divergence = float(np.linalg.norm(rollout_fn(h0 + epsilon * u) - base))
        if divergence == 0.0:
            exponents[i] = LYAPUNOV_FLOOR
        else:
            exponents[i] = max(np.log(divergence / epsilon) / T, LYAPUNOV_FLOOR)
    return float(exponents.mean())


def lyapunov_at(params: dict, net: NetworkConfig, state: HiddenState,
                seed_output, T: int, epsilon: float = 1e-4, k_dirs: int = 10,
                rng: RngStream | None = None, fused: FusedRollout | None = None,
                timestep: int = 0) -> LyapunovEstimate:
    """Exponent of the model's closed-loop simulation around one hidden state.

    Perturbations live in shared-h space; the rollout feeds back predicted
    means starting from seed_output, exactly as the foresight simulation does.
    """
    fused = fused or FusedRollout(params, net)

    def rollout(h_shared: np.ndarray) -> np.ndarray:
        start = state.copy()
        start.shared_h = h_shared[None, :].copy()
        _, final = closed_loop_rollout(params, net, start, seed_output, T,
                                       fused=fused)
        return final.shared_h[0]

    exponent = lyapunov_core(rollout, state.shared_h[0], T, epsilon=epsilon,
                             k_dirs=k_dirs, rng=rng)
    return LyapunovEstimate(timestep=timestep, exponent=exponent,
                            n_directions=k_dirs, epsilon=epsilon)


def lyapunov_trace(params: dict, net: NetworkConfig, observations: dict,
                   T: int = 10, epsilon: float = 1e-4, k_dirs: int = 10,
                   seed: int = 0) -> list:
    """Per-timestep exponents along a teacher-forced pass of a trajectory.

    observations: modality -> (T_traj, dim) normalized arrays; the result has
    one estimate per prediction step (length T_traj - 1).
    """
    outputs, states = open_loop_rollout(params, net, observations)
    fused = FusedRollout(params, net)
    root = RngStream(seed, ("lyapunov-trace",))
    return [
        lyapunov_at(params, net, state, out, T, epsilon=epsilon,
                    k_dirs=k_dirs, rng=root.child(t), fused=fused, timestep=t)
        for t, (out, state) in enumerate(zip(outputs, states))
    ]


def lyapunov_trace_csv(estimates) -> str:
    lines = ["t,lambda,n_directions,epsilon"]
    for est in estimates:
        lines.append(f"{est.timestep},{est.exponent:.9f},"
                     f"{est.n_directions},{est.epsilon:.9g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PCA trajectory export
# ---------------------------------------------------------------------------

@dataclass
class PcaExport:
    components: np.ndarray        # (k, H)
    explained_variance: np.ndarray
    mean: np.ndarray
    rows: list                    # (source, door_type, t, projected (k,))

    def csv(self) -> str:
        k = self.components.shape[0]
        header = "source,door_type,t," + ",".join(f"pc{i+1}" for i in range(k))
        lines = [header]
        for source, door_type, t, proj in self.rows:
            coords = ",".join(f"{x:.9f}" for x in proj)
            lines.append(f"{source},{door_type},{t},{coords}")
        return "\n".join(lines) + "\n"


def pca_trajectory_export(offline, online=(), k: int = 2) -> PcaExport:
    """Project labeled shared-h trajectories into a common PCA plane.

    offline/online: iterables of (source, door_type, (T, H) array).  The fit
    uses only the offline states; online trajectories are projected with the
    same components so both live in one comparable plane.
    """
    offline = list(offline)
    online = list(online)
    if not offline:
        raise ValueError("pca_trajectory_export: need at least one offline trajectory")
    stacked = np.concatenate([traj for _, _, traj in offline], axis=0)
    components, explained, mean = pca_fit(stacked, k)
    rows = []
    for source, door_type, traj in offline + online:
        proj = pca_project(traj, components, mean)
        for t in range(proj.shape[0]):
            rows.append((source, door_type, t, proj[t]))
    return PcaExport(components=components, explained_variance=explained,
                     mean=mean, rows=rows)


# ---------------------------------------------------------------------------
# variance / noise-intensity trace
# ---------------------------------------------------------------------------

def variance_trace_csv(mean_var: dict, foresight: list) -> str:
    """Per-step mean predicted variance, plus sigma and the selected
    candidate's score when foresight diagnostics are present.

    mean_var: modality -> (steps,) arrays from a model-driven episode;
    foresight: the episode's per-step diagnostic dicts (empty for sh and
    sh_noise episodes, which get the variance columns only).
    """
    if not mean_var:
        raise ValueError("episode carries no predicted-variance trace "
                         "(was it run with a model policy?)")
    names = list(mean_var)
    steps = len(next(iter(mean_var.values())))
    with_foresight = len(foresight) == steps and steps > 0
    header = ["t"] + [f"mean_var_{name}" for name in names]
    if with_foresight:
        header += ["sigma", "selected_score"]
    lines = [",".join(header)]
    for t in range(steps):
        cells = [str(t)] + [f"{mean_var[name][t]:.9f}" for name in names]
        if with_foresight:
            record = foresight[t]
            scores = np.asarray(record["scores"], dtype=np.float64)
            selected = int(record["selected_index"])
            cells.append(f"{float(record['sigma']):.9f}")
            cells.append(f"{float(scores[selected]):.9f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
