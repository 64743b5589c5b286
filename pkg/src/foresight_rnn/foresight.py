"""Variance-guided hidden-state refinement.

At each timestep the recurrent state is perturbed into N candidates (noise on
the shared-layer hidden vector, intensity adapted to the running variance of
the episode), each candidate is simulated forward closed-loop for T steps,
and the candidate whose predicted variance drops the most is kept.

The refinement is forward-only: candidate rollouts never carry gradients, the
additive noise is a constant offset in the training graph, and the selection
index is treated as a constant of the graph.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .network import (
    FusedRollout,
    HiddenState,
    NetworkConfig,
    PredictionOutput,
)
from .rng import RngStream


@dataclass(frozen=True)
class ForesightConfig:
    n_candidates: int = 5
    t_max: int = 10
    sigma_min: float = 0.05
    sigma_max: float = 0.15
    # which state parts receive noise: "shared_h" or "shared_hc"
    perturb_target: str = "shared_h"
    # keep candidate 0 unperturbed so refinement can never score worse than
    # no refinement; turn off to sample all N candidates from the Gaussian
    baseline_candidate: bool = True
    # horizon from the step head instead of a fixed t_max
    use_step_head: bool = False
    # testing hook: take this candidate unconditionally, skipping simulation
    forced_index: int | None = None
    # if set, refine only when the normalized episode variance reaches this
    trigger_threshold: float | None = None

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if not (0.0 <= self.sigma_min <= self.sigma_max):
            raise ValueError(f"bad sigma range [{self.sigma_min}, {self.sigma_max}]")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.perturb_target not in ("shared_h", "shared_hc"):
            raise ValueError(f"unknown perturb_target '{self.perturb_target}'")
        if self.forced_index is not None and not (0 <= self.forced_index < self.n_candidates):
            raise ValueError("forced_index out of range")

    @property
    def n_noise(self) -> int:
        return self.n_candidates - 1 if self.baseline_candidate else self.n_candidates


@dataclass
class EpisodeStats:
    """Per-episode running min/max of the scalar mean predicted variance.

    Vectorized over a batch of independent episodes; reset by constructing a
    fresh instance.
    """
    run_min: np.ndarray
    run_max: np.ndarray
    last_norm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.last_norm = np.zeros_like(self.run_min)

    @classmethod
    def fresh(cls, batch: int = 1) -> "EpisodeStats":
        return cls(run_min=np.full(batch, np.inf), run_max=np.full(batch, -np.inf))


def noise_intensity(prev_variance: dict, stats: EpisodeStats) -> np.ndarray:
    """Normalized position of the current mean variance within the episode's
    running [min, max], per batch row, in [0, 1].

    Updates `stats` with the new observation first, so on the first step of
    an episode (run_min == run_max) the position is 0.5 by convention.
    sigma_from_norm maps the result into [sigma_min, sigma_max].
    """
    v = np.concatenate([np.atleast_2d(a) for a in prev_variance.values()],
                       axis=1).mean(axis=1)
    stats.run_min = np.minimum(stats.run_min, v)
    stats.run_max = np.maximum(stats.run_max, v)
    spread = stats.run_max - stats.run_min
    norm = np.where(spread > 0.0,
                    np.clip((v - stats.run_min) / (spread + 1e-12), 0.0, 1.0),
                    0.5)
    stats.last_norm = norm
    return norm


def sigma_from_norm(norm: np.ndarray, config: ForesightConfig) -> np.ndarray:
    return config.sigma_min + (config.sigma_max - config.sigma_min) * norm


def noise_sigma(prev_variance: dict, stats: EpisodeStats,
                config: ForesightConfig) -> np.ndarray:
    """sigma per batch row: sigma_min + (sigma_max - sigma_min) * normalized
    variance, midpoint on the first step of an episode."""
    return sigma_from_norm(noise_intensity(prev_variance, stats), config)


def draw_candidate_noise(rng: RngStream, config: ForesightConfig,
                         shared_hidden: int) -> np.ndarray:
    """Unit-variance noise block (n_noise, width) for one sample's timestep.

    The first row is always the draw an unselected single-noise variant
    would make from the same stream, which is what makes forced-candidate
    runs reproduce the noise-only baseline exactly.
    """
    width = shared_hidden * (2 if config.perturb_target == "shared_hc" else 1)
    return rng.normal((config.n_noise, width))


def sample_candidates(state: HiddenState, sigma, n: int, rng: RngStream,
                      config: ForesightConfig | None = None) -> list:
    """n candidate states: noise of std sigma on the perturb target, all
    other parts shared.  Candidate 0 is the unperturbed state itself when the
    baseline candidate is enabled (default)."""
    if config is None:
        config = ForesightConfig(n_candidates=n)
    elif config.n_candidates != n:
        config = dataclasses.replace(config, n_candidates=n)
    h_dim = state.shared_h.shape[1]
    batch = state.batch
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (batch,))
    blocks = np.stack([draw_candidate_noise(rng.child(b), config, h_dim)
                       for b in range(batch)])  # (B, n_noise, width)
    out = []
    for k in range(n):
        if config.baseline_candidate and k == 0:
            out.append(state.copy())
            continue
        j = k - 1 if config.baseline_candidate else k
        cand = state.copy()
        z = blocks[:, j, :]
        cand.shared_h = state.shared_h + sigma[:, None] * z[:, :h_dim]
        if config.perturb_target == "shared_hc":
            cand.shared_c = state.shared_c + sigma[:, None] * z[:, h_dim:]
        out.append(cand)
    return out


def score_candidate(cand_rollout: list, initial: PredictionOutput) -> np.ndarray:
    """Sum over modalities and dims of (var at t) - (var after the rollout),
    per batch row.  Positive means the simulated future got more certain."""
    if len(cand_rollout) < 1:
        raise ValueError("empty candidate rollout")
    final = cand_rollout[-1]
    parts = [np.atleast_2d(initial.var[m]) - np.atleast_2d(final.var[m])
             for m in initial.var]
    return np.concatenate(parts, axis=1).sum(axis=1)


@dataclass
class CandidateResult:
    perturbed_state: HiddenState
    initial_variance: dict
    final_variance: dict
    score: np.ndarray
    rollout: list


@dataclass
class RefineDiagnostics:
    """Per-timestep refinement summary, batch-first arrays."""
    sigma: np.ndarray          # (B,)
    horizon: np.ndarray        # (B,) int
    scores: np.ndarray         # (B, n)
    selected: np.ndarray       # (B,) int
    mean_var_initial: np.ndarray   # (B,) mean over dims at t
    mean_var_final: np.ndarray     # (B,) selected candidate's, at t+T

    def record(self, b: int = 0) -> dict:
        """JSON-ready dict for one batch row."""
        return {
            "sigma": float(self.sigma[b]),
            "horizon": int(self.horizon[b]),
            "scores": [float(s) for s in self.scores[b]],
            "selected_index": int(self.selected[b]),
            "mean_var_t": float(self.mean_var_initial[b]),
            "mean_var_t_plus_T": float(self.mean_var_final[b]),
        }


def refine_batch(params: dict, net: NetworkConfig, config: ForesightConfig,
                 state: HiddenState, sigma: np.ndarray, noise: np.ndarray,
                 fused: FusedRollout | None = None, collect_rollouts: bool = False):
    """Core refinement on a batch of B independent states.

    sigma: (B,) noise std per row; noise: (B, n_noise, width) unit-variance
    draws (see draw_candidate_noise).  Returns (new_state, RefineDiagnostics,
    rollouts) where rollouts is a per-step list of packed fused outputs when
    requested (None otherwise).  Selection: argmax of the variance-reduction
    score, ties to the lowest candidate index; the new state differs from the
    input only in the perturb target.
    """
    if fused is None:
        fused = FusedRollout(params, net)
    n = config.n_candidates
    B = state.batch
    h_dim = net.shared_hidden
    sigma = np.asarray(sigma, dtype=np.float64).reshape(B)

    packed = fused.pack_state(state.repeat(n))
    h_low, c_low, h_sh, c_sh = packed
    # scatter noise into the perturbed candidate rows
    offsets = np.zeros((B, n, h_dim))
    k0 = 1 if config.baseline_candidate else 0
    offsets[:, k0:, :] = sigma[:, None, None] * noise[:, :, :h_dim]
    h_sh = h_sh + offsets.reshape(B * n, h_dim)
    if config.perturb_target == "shared_hc":
        offc = np.zeros((B, n, h_dim))
        offc[:, k0:, :] = sigma[:, None, None] * noise[:, :, h_dim:]
        c_sh = c_sh + offc.reshape(B * n, h_dim)
    packed = (h_low, c_low, h_sh, c_sh)
    perturbed_h_sh = h_sh
    perturbed_c_sh = c_sh

    mean0, var0, step0 = fused.decode(packed)
    var0_sum = var0.sum(axis=1)

    if config.forced_index is not None:
        # bypass the simulation entirely; selection is dictated
        selected = np.full(B, config.forced_index, dtype=int)
        new_state = _gather_selected(state, config, selected, n,
                                     perturbed_h_sh, perturbed_c_sh)
        diag = RefineDiagnostics(
            sigma=sigma, horizon=np.zeros(B, dtype=int),
            scores=np.zeros((B, n)), selected=selected,
            mean_var_initial=var0_sum.reshape(B, n)[:, 0] / net.total_dim,
            mean_var_final=np.full(B, np.nan))
        return new_state, diag, None

    if config.use_step_head:
        # step heads decode from the lower layers, so every candidate of a
        # sample agrees; read candidate 0 of each
        per_sample = step0.reshape(B, n, -1)[:, 0, :]
        horizon = np.clip(np.floor(per_sample.max(axis=1) + 0.5),
                          1, config.t_max).astype(int)
    else:
        horizon = np.full(B, config.t_max, dtype=int)
    horizon_flat = np.repeat(horizon, n)
    t_roll = int(horizon.max())

    final_var_sum = np.empty(B * n)
    final_var_mean = np.empty(B * n)
    rollouts = [] if collect_rollouts else None
    x = mean0
    for s in range(1, t_roll + 1):
        mean, var, _, packed = fused.step(x, packed)
        if collect_rollouts:
            rollouts.append((mean, var))
        at = horizon_flat == s
        if np.any(at):
            final_var_sum[at] = var[at].sum(axis=1)
            final_var_mean[at] = var[at].mean(axis=1)
        x = mean

    scores = (var0_sum - final_var_sum).reshape(B, n)
    selected = np.argmax(scores, axis=1)  # first max: lowest-index tie-break
    new_state = _gather_selected(state, config, selected, n,
                                 perturbed_h_sh, perturbed_c_sh)
    flat_sel = np.arange(B) * n + selected
    diag = RefineDiagnostics(
        sigma=sigma, horizon=horizon, scores=scores, selected=selected,
        mean_var_initial=var0.reshape(B, n, -1)[:, 0, :].mean(axis=1),
        mean_var_final=final_var_mean[flat_sel])
    return new_state, diag, rollouts


def _gather_selected(state, config, selected, n, perturbed_h_sh, perturbed_c_sh):
    B = state.batch
    flat = np.arange(B) * n + selected
    new_state = state.copy()
    new_state.shared_h = perturbed_h_sh[flat]
    if config.perturb_target == "shared_hc":
        new_state.shared_c = perturbed_c_sh[flat]
    return new_state


def foresight_refine(params: dict, net: NetworkConfig, config: ForesightConfig,
                     state: HiddenState, last_output: PredictionOutput,
                     rng: RngStream, stats: EpisodeStats | None = None,
                     fused: FusedRollout | None = None):
    """Refine a hidden state by simulated foresight.

    Computes the adaptive sigma from last_output's variance (fresh episode
    stats if none carried), samples candidates, scores each by closed-loop
    simulation, and returns (selected state, list of CandidateResult).  The
    returned state differs from the input only in the perturbed components;
    with a single candidate this is the identity.
    """
    B = state.batch
    if stats is None:
        stats = EpisodeStats.fresh(B)
    if fused is None:
        fused = FusedRollout(params, net)
    sigma = sigma_from_norm(noise_intensity(last_output.var, stats), config)
    if config.trigger_threshold is not None:
        sigma = np.where(stats.last_norm >= config.trigger_threshold, sigma, 0.0)
    h_dim = net.shared_hidden
    noise = np.stack([draw_candidate_noise(rng.child(b), config, h_dim)
                      for b in range(B)])
    new_state, diag, rollouts = refine_batch(
        params, net, config, state, sigma, noise, fused=fused,
        collect_rollouts=True)

    # repackage per candidate for inspection
    n = config.n_candidates
    results = []
    for k in range(n):
        rows = np.arange(B) * n + k
        cand = state.copy()
        relative = k - 1 if config.baseline_candidate else k
        if not (config.baseline_candidate and k == 0):
            cand.shared_h = state.shared_h + sigma[:, None] * noise[:, relative, :h_dim]
            if config.perturb_target == "shared_hc":
                cand.shared_c = state.shared_c + sigma[:, None] * noise[:, relative, h_dim:]
        initial_var = decode_var_split(fused, net, cand)
        if rollouts is None:
            final_var = {m.name: np.full((B, m.dim), np.nan) for m in net.modalities}
            roll = []
        else:
            roll = [PredictionOutput(mean=fused.split(mean[rows]),
                                     var=fused.split(var[rows]), step={})
                    for mean, var in rollouts]
            final_var = {mn: v.copy() for mn, v in roll[-1].var.items()} if roll else {}
        results.append(CandidateResult(
            perturbed_state=cand, initial_variance=initial_var,
            final_variance=final_var,
            score=diag.scores[:, k].copy(), rollout=roll))
    return new_state, results, diag


def decode_var_split(fused: FusedRollout, net: NetworkConfig,
                     state: HiddenState) -> dict:
    _, var, _ = fused.decode(fused.pack_state(state))
    return fused.split(var)
