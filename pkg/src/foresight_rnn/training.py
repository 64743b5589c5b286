"""Teacher-forced BPTT training of the three model variants.

Per timestep, each variant applies its state hook BEFORE predicting:
``ufrnn`` refines the shared hidden state by simulated-future selection,
``sh_noise`` adds Gaussian noise of the same adaptive intensity without any
selection, ``sh`` does nothing.  The prediction loss is the Gaussian
negative log likelihood of the next observation under the decoded mean and
variance, summed over timesteps and modalities.

Gradients are exact BPTT under the hook's declared semantics: the additive
perturbation is a constant of the graph (identity path through the hidden
state, no gradient into the noise scale or the candidate selection).  Every
hook records the offset it applied, and ``sequence_loss`` can replay those
records verbatim — finite-differencing the replayed loss is then a valid
oracle for the analytic gradients.

Noise streams are keyed by (seed, epoch, trajectory id, timestep), never by
batch position, so shuffling does not change the draws and any two variants
see identical noise given identical configs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainingConfig, config_to_dict
from .dataset import Trajectory
from .foresight import (
    EpisodeStats,
    ForesightConfig,
    draw_candidate_noise,
    noise_intensity,
    refine_batch,
    sigma_from_norm,
)
from .network import (
    FusedRollout,
    HiddenState,
    ModalitySpec,
    NetworkConfig,
    StateGrad,
    backward_step,
    decode_heads,
    forward_step_cached,
    init_params,
    zero_grads,
)
from .numerics import (
    adam_init,
    adam_step,
    clip_global_norm,
    finite_diff_gradcheck,
    gaussian_nll_grads,
)
from .rng import RngStream

GRAD_CLIP_NORM = 5.0


@dataclass
class HookRecord:
    """What a variant hook actually did at one timestep of one sequence."""
    sigma: float
    offset_h: np.ndarray | None       # additive offset on shared h, or None
    offset_c: np.ndarray | None       # additive offset on shared c, or None
    selected: int | None              # chosen candidate index (ufrnn only)
    scores: np.ndarray | None         # candidate scores (ufrnn only)


@dataclass
class BatchResult:
    loss_per_sequence: np.ndarray             # (B,) summed over steps/modalities
    loss_per_modality: dict                   # name -> (B,)
    grads: dict                               # summed over the batch
    records: list                             # per sequence: list of HookRecord


def _require_finite(elementwise: np.ndarray, t: int, ids) -> None:
    if np.isfinite(elementwise).all():
        return
    bad = int(np.argwhere(~np.isfinite(elementwise).all(axis=1))[0, 0])
    raise FloatingPointError(
        f"non-finite loss at timestep {t} in sequence '{ids[bad]}'")


def _apply_hook(variant: str, params: dict, net: NetworkConfig,
                fs: ForesightConfig, state: HiddenState, last_out,
                stats: EpisodeStats, streams, t: int, fused,
                records: list) -> HiddenState:
    """Run one variant hook live, appending a HookRecord per sequence."""
    if variant == "sh":
        for rec in records:
            rec.append(HookRecord(0.0, None, None, None, None))
        return state

    norm = noise_intensity(last_out.var, stats)
    sigma = sigma_from_norm(norm, fs)
    if fs.trigger_threshold is not None:
        sigma = np.where(norm >= fs.trigger_threshold, sigma, 0.0)

    B = state.batch
    H = net.shared_hidden
    width = 2 * H if fs.perturb_target == "shared_hc" else H
    if variant == "ufrnn":
        noise = np.stack([draw_candidate_noise(streams[b].child(t), fs, H)
                          for b in range(B)])
        new_state, diag, _ = refine_batch(params, net, fs, state, sigma,
                                          noise, fused=fused)
        for b in range(B):
            records[b].append(HookRecord(
                sigma=float(sigma[b]),
                offset_h=new_state.shared_h[b] - state.shared_h[b],
                offset_c=(new_state.shared_c[b] - state.shared_c[b]
                          if fs.perturb_target == "shared_hc" else None),
                selected=int(diag.selected[b]),
                scores=diag.scores[b].copy()))
        return new_state

    # sh_noise: same adaptive intensity, single draw, no selection
    z = np.empty((B, width))
    for b in range(B):
        z[b] = streams[b].child(t).normal(width)
    off_h = sigma[:, None] * z[:, :H]
    off_c = sigma[:, None] * z[:, H:] if width == 2 * H else None
    for b in range(B):
        records[b].append(HookRecord(
            sigma=float(sigma[b]), offset_h=off_h[b],
            offset_c=None if off_c is None else off_c[b],
            selected=None, scores=None))
    return HiddenState(
        lower_h=state.lower_h, lower_c=state.lower_c,
        shared_h=state.shared_h + off_h,
        shared_c=state.shared_c if off_c is None else state.shared_c + off_c)


def _apply_replay(state: HiddenState, replay, t: int) -> HiddenState:
    """Re-apply recorded offsets as constants (the gradcheck path)."""
    offs_h = [seq[t].offset_h for seq in replay]
    if all(o is None for o in offs_h):
        return state
    off_h = np.stack([np.zeros(state.shared_h.shape[1]) if o is None else o
                      for o in offs_h])
    shared_c = state.shared_c
    if any(seq[t].offset_c is not None for seq in replay):
        off_c = np.stack([np.zeros(state.shared_c.shape[1])
                          if seq[t].offset_c is None else seq[t].offset_c
                          for seq in replay])
        shared_c = shared_c + off_c
    return HiddenState(lower_h=state.lower_h, lower_c=state.lower_c,
                       shared_h=state.shared_h + off_h, shared_c=shared_c)


def batch_loss(trajectories, params: dict, net: NetworkConfig, variant: str,
               fs: ForesightConfig, streams=None, replay=None,
               apply_hooks: bool = True) -> BatchResult:
    """Loss and exact BPTT gradients for a batch of equal-length sequences.

    streams: one RngStream per sequence (hook noise); replay: per-sequence
    HookRecord lists from an earlier call, applied instead of live hooks.
    Gradients are summed over the batch.
    """
    obs = {m.name: np.stack([traj.observations[m.name] for traj in trajectories])
           for m in net.modalities}
    ids = [traj.id for traj in trajectories]
    B = len(trajectories)
    T = next(iter(obs.values())).shape[1]
    if T < 2:
        raise ValueError("sequences must have at least 2 timesteps")

    live = replay is None and apply_hooks and variant != "sh"
    if live and streams is None:
        raise ValueError(f"variant '{variant}' needs noise streams")
    fused = FusedRollout(params, net) if (live and variant == "ufrnn") else None

    state = HiddenState.zeros(net, B)
    stats = EpisodeStats.fresh(B)
    last_out = decode_heads(params, net, state)
    records = [[] for _ in range(B)]
    caches = []
    loss_mod = {m.name: np.zeros(B) for m in net.modalities}

    for t in range(T - 1):
        if replay is not None:
            state = _apply_replay(state, replay, t)
        elif apply_hooks:
            state = _apply_hook(variant, params, net, fs, state, last_out,
                                stats, streams, t, fused, records)
        else:
            for rec in records:
                rec.append(HookRecord(0.0, None, None, None, None))
        inputs = {name: obs[name][:, t, :] for name in obs}
        out, state, cache = forward_step_cached(params, net, inputs, state)
        for m in net.modalities:
            target = obs[m.name][:, t + 1, :]
            resid = target - out.mean[m.name]
            el = (0.5 * resid * resid / out.var[m.name]
                  + 0.5 * np.log(2.0 * np.pi * out.var[m.name]))
            _require_finite(el, t, ids)
            loss_mod[m.name] += el.sum(axis=1)
        caches.append((cache, out))
        last_out = out

    grads = zero_grads(net)
    d_state = StateGrad.zeros_like(state)
    for t in range(T - 2, -1, -1):
        cache, out = caches[t]
        d_out = {"mean": {}, "var": {}}
        for m in net.modalities:
            target = obs[m.name][:, t + 1, :]
            dmean, dvar = gaussian_nll_grads(out.mean[m.name],
                                             out.var[m.name], target)
            d_out["mean"][m.name] = dmean
            d_out["var"][m.name] = dvar
        d_state = backward_step(params, net, cache, d_out, d_state, grads)
        # the hook is identity-plus-constant: gradients pass through unchanged

    return BatchResult(
        loss_per_sequence=sum(loss_mod.values()),
        loss_per_modality=loss_mod,
        grads=grads,
        records=records)


def sequence_loss(traj: Trajectory, params: dict, net: NetworkConfig,
                  variant: str, fs: ForesightConfig, rng: RngStream | None,
                  replay=None, apply_hooks: bool = True):
    """Single-sequence loss and gradients.

    Returns (loss, grads, records) where records are this run's per-step
    HookRecords; pass them back as ``replay=records`` to evaluate the exact
    function the analytic gradients differentiate.
    """
    result = batch_loss([traj], params, net, variant, fs,
                        streams=None if rng is None else [rng],
                        replay=None if replay is None else [replay],
                        apply_hooks=apply_hooks)
    return (float(result.loss_per_sequence[0]), result.grads,
            result.records[0])


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    epoch: int
    loss_total: float
    loss_per_modality: dict
    seconds: float


def metrics_header(modality_names) -> str:
    return ",".join(["epoch", "loss_total"]
                    + [f"loss_{n}" for n in modality_names] + ["seconds"])


def format_metrics_row(row: MetricsRow, modality_names) -> str:
    cells = [str(row.epoch), f"{row.loss_total:.9f}"]
    cells += [f"{row.loss_per_modality[n]:.9f}" for n in modality_names]
    cells.append(f"{row.seconds:.3f}")
    return ",".join(cells)


@dataclass
class MetricsLog:
    modality_names: list
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def render(self) -> str:
        lines = [metrics_header(self.modality_names)]
        lines += [format_metrics_row(r, self.modality_names) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.render())


def train(config: TrainingConfig, trajectories, normalizer, out_dir,
          progress=None) -> MetricsLog:
    """Minibatch Adam over shuffled full sequences; deterministic per seed.

    Writes checkpoints/checkpoint_<epoch>.ckpt every checkpoint_every epochs
    and returns the in-memory metrics log (the caller decides where the CSV
    goes).  progress: optional callable(MetricsRow) for live reporting.
    """
    if config.batch_size > len(trajectories):
        raise ValueError(
            f"batch_size {config.batch_size} exceeds dataset size "
            f"{len(trajectories)}")
    out_dir = Path(out_dir)
    modalities = [(name, arr.shape[1])
                  for name, arr in trajectories[0].observations.items()]
    net = config.network_config(modalities)
    echo = config_to_dict(config, modalities=modalities,
                          bounds=normalizer.bounds)

    params = init_params_seeded(net, config.seed)
    opt = adam_init(params)
    shuffle_root = RngStream(config.seed, ("shuffle",))
    noise_root = RngStream(config.seed, ("noise",))
    log = MetricsLog(modality_names=[name for name, _ in modalities])

    n = len(trajectories)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_root.child(epoch).permutation(n)
        epoch_loss = np.zeros(n)
        epoch_mod = {name: np.zeros(n) for name, _ in modalities}
        pos = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [trajectories[i] for i in idx]
            streams = [noise_root.child(epoch, traj.id) for traj in batch]
            result = batch_loss(
                batch, params, net, config.variant, config.foresight,
                streams=streams, apply_hooks=config.foresight_during_training)
            grads = {k: g / len(batch) for k, g in result.grads.items()}
            grads, _ = clip_global_norm(grads, GRAD_CLIP_NORM)
            params, opt = adam_step(params, grads, opt, config.lr)
            epoch_loss[pos:pos + len(batch)] = result.loss_per_sequence
            for name in epoch_mod:
                epoch_mod[name][pos:pos + len(batch)] = result.loss_per_modality[name]
            pos += len(batch)
        seconds = 0.0 if config.deterministic_timing else time.perf_counter() - started
        row = MetricsRow(
            epoch=epoch,
            loss_total=float(epoch_loss.mean()),
            loss_per_modality={name: float(v.mean()) for name, v in epoch_mod.items()},
            seconds=seconds)
        log.append(row)
        if progress is not None:
            progress(row)
        if epoch % config.checkpoint_every == 0:
            path = out_dir / "checkpoints" / f"checkpoint_{epoch:06d}.ckpt"
            save_checkpoint(path, params, opt, echo, epoch)
            log.checkpoints.append(path)
    return log


def init_params_seeded(net: NetworkConfig, seed: int) -> dict:
    """The trainer's canonical parameter initialization stream."""
    return init_params(net, RngStream(seed, ("init",)))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def tiny_gradcheck_setup(seed: int = 0):
    """A deliberately small model and sequence for finite-difference checks:
    two 2-dim modalities, hidden sizes 4+4+6, a 5-step trajectory."""
    net = NetworkConfig(
        modalities=(ModalitySpec("a", 2, 4), ModalitySpec("b", 2, 4)),
        shared_hidden=6, input_proj=3, feedback_proj=3, shared_proj=4,
        t_max=4)
    params = init_params(net, RngStream(seed, ("gradcheck-init",)))
    data_rng = RngStream(seed, ("gradcheck-data",))
    traj = Trajectory(
        id="gradcheck", door_type="push",
        observations={"a": data_rng.uniform(-0.9, 0.9, (5, 2)),
                      "b": data_rng.uniform(-0.9, 0.9, (5, 2))})
    fs = ForesightConfig(n_candidates=3, t_max=3)
    return net, params, traj, fs


def gradcheck_variant(variant: str, seed: int = 0, epsilon: float = 1e-4,
                      max_coords: int = 200, inject_bug: bool = False):
    """Compare one variant's analytic BPTT gradients to finite differences.

    The live pass records every hook offset; finite differences evaluate the
    replayed-offset loss, which is exactly the function the analytic
    gradients differentiate (perturbations and selections are constants of
    the graph).  inject_bug scales the analytic gradients by 1.01 — a
    negative control proving the check can fail.
    """
    net, params, traj, fs = tiny_gradcheck_setup(seed)
    rng = RngStream(seed, ("gradcheck-noise", variant))
    _, grads, records = sequence_loss(traj, params, net, variant, fs, rng)
    if inject_bug:
        grads = {k: g * 1.01 for k, g in grads.items()}

    def replayed_loss(p: dict) -> float:
        loss, _, _ = sequence_loss(traj, p, net, variant, fs, None,
                                   replay=records)
        return loss

    return finite_diff_gradcheck(replayed_loss, params, grads,
                                 epsilon=epsilon, max_coords=max_coords,
                                 rng=np.random.default_rng(seed))
