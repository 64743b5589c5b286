"""Stochastic hierarchical LSTM: per-modality lower recurrent layers with
mean/variance/step heads and a slower shared layer on top.

Wiring per step (batch-first, all arrays float64):

  lower input_m  = [W_in_m x_m + b | W_fb_m h_shared_prev + b]
  h~_m, c_m      = LSTM_m(lower input_m, h_m_prev, c_m_prev)
  h_m            = (1 - 1/tau_lower) h_m_prev + (1/tau_lower) h~_m
  shared input   = W_sh [h_m ...] + b        (post-integration lower h's)
  h~_s, c_s      = LSTM_shared(shared input, h_shared_prev, c_shared_prev)
  h_shared       = (1 - 1/tau_shared) h_shared_prev + (1/tau_shared) h~_s

Leaky integration acts on the hidden vectors only; cell states follow the
plain LSTM recurrence.  Heads decode from the integrated lower h:
mean = tanh, variance = softplus + 1e-6, step = 1 + (t_max-1) sigmoid.

Gradients are hand-derived (see backward_step); forward_step_cached returns
everything the backward pass needs.  closed_loop_rollout runs on a collapsed
form of the linear layers (one fused matmul per layer per step) since
rollouts never need gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import lstm_cell_backward, lstm_cell_forward, softplus
from .rng import RngStream


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    lower_hidden: int = 50


@dataclass(frozen=True)
class NetworkConfig:
    modalities: tuple[ModalitySpec, ...]
    shared_hidden: int = 50
    input_proj: int = 16
    feedback_proj: int = 16
    shared_proj: int = 32
    tau_lower: float = 2.0
    tau_shared: float = 12.0
    t_max: int = 10
    var_floor: float = 1e-6

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names: {names}")
        if self.tau_lower < 1.0 or self.tau_shared < 1.0:
            raise ValueError("timescales must be >= 1")

    @property
    def total_dim(self) -> int:
        return sum(m.dim for m in self.modalities)

    @property
    def total_lower_hidden(self) -> int:
        return sum(m.lower_hidden for m in self.modalities)


@dataclass
class HiddenState:
    """Recurrent state: per-modality lower (h, c) plus the shared pair.

    All arrays are (batch, hidden).
    """
    lower_h: dict
    lower_c: dict
    shared_h: np.ndarray
    shared_c: np.ndarray

    @classmethod
    def zeros(cls, config: NetworkConfig, batch: int = 1) -> "HiddenState":
        return cls(
            lower_h={m.name: np.zeros((batch, m.lower_hidden)) for m in config.modalities},
            lower_c={m.name: np.zeros((batch, m.lower_hidden)) for m in config.modalities},
            shared_h=np.zeros((batch, config.shared_hidden)),
            shared_c=np.zeros((batch, config.shared_hidden)),
        )

    @property
    def batch(self) -> int:
        return self.shared_h.shape[0]

    def copy(self) -> "HiddenState":
        return HiddenState(
            lower_h={k: v.copy() for k, v in self.lower_h.items()},
            lower_c={k: v.copy() for k, v in self.lower_c.items()},
            shared_h=self.shared_h.copy(),
            shared_c=self.shared_c.copy(),
        )

    def repeat(self, n: int) -> "HiddenState":
        """Tile every row n times: row b of self becomes rows b*n..b*n+n-1."""
        rep = lambda a: np.repeat(a, n, axis=0)
        return HiddenState(
            lower_h={k: rep(v) for k, v in self.lower_h.items()},
            lower_c={k: rep(v) for k, v in self.lower_c.items()},
            shared_h=rep(self.shared_h),
            shared_c=rep(self.shared_c),
        )


@dataclass
class PredictionOutput:
    """Per-modality decoded heads, arrays (batch, dim); step is (batch,)."""
    mean: dict
    var: dict
    step: dict


def _order(config: NetworkConfig):
    return [m.name for m in config.modalities]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_spec(config: NetworkConfig):
    """Ordered list of (name, shape, fan_in) for every trainable array."""
    spec = []
    for m in config.modalities:
        u = config.input_proj + config.feedback_proj
        spec += [
            (f"{m.name}.w_in", (m.dim, config.input_proj), m.dim),
            (f"{m.name}.b_in", (config.input_proj,), None),
            (f"{m.name}.w_fb", (config.shared_hidden, config.feedback_proj), config.shared_hidden),
            (f"{m.name}.b_fb", (config.feedback_proj,), None),
            (f"{m.name}.lstm.wx", (u, 4 * m.lower_hidden), u),
            (f"{m.name}.lstm.wh", (m.lower_hidden, 4 * m.lower_hidden), m.lower_hidden),
            (f"{m.name}.lstm.b", (4 * m.lower_hidden,), None),
            (f"{m.name}.head.w_mean", (m.lower_hidden, m.dim), m.lower_hidden),
            (f"{m.name}.head.b_mean", (m.dim,), None),
            (f"{m.name}.head.w_var", (m.lower_hidden, m.dim), m.lower_hidden),
            (f"{m.name}.head.b_var", (m.dim,), None),
            (f"{m.name}.head.w_step", (m.lower_hidden, 1), m.lower_hidden),
            (f"{m.name}.head.b_step", (1,), None),
        ]
    spec += [
        ("shared.w_in", (config.total_lower_hidden, config.shared_proj), config.total_lower_hidden),
        ("shared.b_in", (config.shared_proj,), None),
        ("shared.lstm.wx", (config.shared_proj, 4 * config.shared_hidden), config.shared_proj),
        ("shared.lstm.wh", (config.shared_hidden, 4 * config.shared_hidden), config.shared_hidden),
        ("shared.lstm.b", (4 * config.shared_hidden,), None),
    ]
    return spec


def init_params(config: NetworkConfig, rng: RngStream) -> dict:
    """Weights ~ uniform(+-1/sqrt(fan_in)); biases zero except LSTM forget
    gates, which start at 1.0.  Each array draws from its own child stream so
    the result is independent of iteration order.
    """
    params = {}
    for name, shape, fan_in in param_spec(config):
        if fan_in is None:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.child(name).uniform(-bound, bound, shape)
        if name.endswith("lstm.b"):
            h = shape[0] // 4
            arr[h:2 * h] = 1.0
        params[name] = arr
    return params


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class StepCache:
    inputs: dict          # modality -> (B, dim) as consumed
    lower: dict           # modality -> lstm cache tuple
    lower_h_prev: dict
    lower_h_new: dict
    shared_cache: tuple
    shared_h_prev: np.ndarray
    hcat: np.ndarray
    mean: dict            # tanh outputs (for the tanh' term)
    var_sig: dict         # expit of the variance pre-activation
    step_sig: dict        # expit of the step pre-activation


def _as_batch(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def decode_heads(params: dict, config: NetworkConfig, state: HiddenState) -> PredictionOutput:
    """Decode mean/variance/step from the lower hidden vectors of a state."""
    mean, var, step = {}, {}, {}
    for m in config.modalities:
        h = state.lower_h[m.name]
        mean[m.name] = np.tanh(h @ params[f"{m.name}.head.w_mean"] + params[f"{m.name}.head.b_mean"])
        var[m.name] = softplus(h @ params[f"{m.name}.head.w_var"] + params[f"{m.name}.head.b_var"]) + config.var_floor
        s = expit(h @ params[f"{m.name}.head.w_step"] + params[f"{m.name}.head.b_step"])
        step[m.name] = 1.0 + (config.t_max - 1.0) * s[:, 0]
    return PredictionOutput(mean=mean, var=var, step=step)


def forward_step_cached(params: dict, config: NetworkConfig, inputs: dict,
                        state: HiddenState):
    """One network step.  Returns (PredictionOutput, HiddenState, StepCache)."""
    a_low = 1.0 - 1.0 / config.tau_lower
    a_sh = 1.0 - 1.0 / config.tau_shared
    h_sh_prev = state.shared_h

    xs, lower_caches, h_prev, h_new, c_new = {}, {}, {}, {}, {}
    for m in config.modalities:
        x = _as_batch(inputs[m.name])
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite input for modality '{m.name}'")
        if x.shape[1] != m.dim:
            raise ValueError(
                f"dimension mismatch: input '{m.name}' has {x.shape[1]} dims, expected {m.dim}")
        proj = x @ params[f"{m.name}.w_in"] + params[f"{m.name}.b_in"]
        fb = h_sh_prev @ params[f"{m.name}.w_fb"] + params[f"{m.name}.b_fb"]
        u = np.concatenate([proj, fb], axis=1)
        h_tilde, c, cache = lstm_cell_forward(
            u, state.lower_h[m.name], state.lower_c[m.name],
            params[f"{m.name}.lstm.wx"], params[f"{m.name}.lstm.wh"],
            params[f"{m.name}.lstm.b"],
            names=(f"{m.name}.u", f"{m.name}.h", f"{m.name}.c",
                   f"{m.name}.lstm.wx", f"{m.name}.lstm.wh", f"{m.name}.lstm.b"))
        xs[m.name] = x
        lower_caches[m.name] = cache
        h_prev[m.name] = state.lower_h[m.name]
        h_new[m.name] = a_low * state.lower_h[m.name] + (1.0 - a_low) * h_tilde
        c_new[m.name] = c

    hcat = np.concatenate([h_new[m.name] for m in config.modalities], axis=1)
    s_in = hcat @ params["shared.w_in"] + params["shared.b_in"]
    h_tilde_sh, c_sh, shared_cache = lstm_cell_forward(
        s_in, h_sh_prev, state.shared_c,
        params["shared.lstm.wx"], params["shared.lstm.wh"], params["shared.lstm.b"],
        names=("shared.in", "shared.h", "shared.c",
               "shared.lstm.wx", "shared.lstm.wh", "shared.lstm.b"))
    h_sh_new = a_sh * h_sh_prev + (1.0 - a_sh) * h_tilde_sh

    mean, var, step = {}, {}, {}
    var_sig, step_sig = {}, {}
    for m in config.modalities:
        h = h_new[m.name]
        mean[m.name] = np.tanh(h @ params[f"{m.name}.head.w_mean"] + params[f"{m.name}.head.b_mean"])
        pre_var = h @ params[f"{m.name}.head.w_var"] + params[f"{m.name}.head.b_var"]
        var[m.name] = softplus(pre_var) + config.var_floor
        var_sig[m.name] = expit(pre_var)
        s = expit(h @ params[f"{m.name}.head.w_step"] + params[f"{m.name}.head.b_step"])
        step_sig[m.name] = s
        step[m.name] = 1.0 + (config.t_max - 1.0) * s[:, 0]

    output = PredictionOutput(mean=mean, var=var, step=step)
    new_state = HiddenState(lower_h=h_new, lower_c=c_new,
                            shared_h=h_sh_new, shared_c=c_sh)
    cache = StepCache(inputs=xs, lower=lower_caches, lower_h_prev=h_prev,
                      lower_h_new=h_new, shared_cache=shared_cache,
                      shared_h_prev=h_sh_prev, hcat=hcat, mean=mean,
                      var_sig=var_sig, step_sig=step_sig)
    return output, new_state, cache


def forward_step(params: dict, config: NetworkConfig, inputs: dict,
                 state: HiddenState):
    """forward_step_cached without the cache."""
    output, new_state, _ = forward_step_cached(params, config, inputs, state)
    return output, new_state


@dataclass
class StateGrad:
    """Gradient w.r.t. a HiddenState, same array layout."""
    lower_h: dict
    lower_c: dict
    shared_h: np.ndarray
    shared_c: np.ndarray

    @classmethod
    def zeros_like(cls, state: HiddenState) -> "StateGrad":
        return cls(
            lower_h={k: np.zeros_like(v) for k, v in state.lower_h.items()},
            lower_c={k: np.zeros_like(v) for k, v in state.lower_c.items()},
            shared_h=np.zeros_like(state.shared_h),
            shared_c=np.zeros_like(state.shared_c),
        )


def backward_step(params: dict, config: NetworkConfig, cache: StepCache,
                  d_out: dict, d_state: StateGrad, grads: dict) -> StateGrad:
    """Backward through one forward_step.

    d_out: per-modality dicts 'mean'/'var' (and optional 'step') holding
    gradients of the loss w.r.t. this step's decoded heads; d_state holds the
    gradient flowing back from step t+1 into this step's output state.
    Parameter gradients accumulate into `grads`; the return value is the
    gradient w.r.t. the input state.
    """
    a_low = 1.0 - 1.0 / config.tau_lower
    a_sh = 1.0 - 1.0 / config.tau_shared

    # shared layer: leaky integration then LSTM
    dh_sh_new = d_state.shared_h
    dh_tilde_sh = (1.0 - a_sh) * dh_sh_new
    ds_in, dh_sh_rec, dc_sh_prev, dwx, dwh, db = lstm_cell_backward(
        dh_tilde_sh, d_state.shared_c, cache.shared_cache,
        params["shared.lstm.wx"], params["shared.lstm.wh"])
    grads["shared.lstm.wx"] += dwx
    grads["shared.lstm.wh"] += dwh
    grads["shared.lstm.b"] += db
    grads["shared.w_in"] += cache.hcat.T @ ds_in
    grads["shared.b_in"] += ds_in.sum(axis=0)
    dhcat = ds_in @ params["shared.w_in"].T
    dh_sh_prev = a_sh * dh_sh_new + dh_sh_rec

    d_prev = StateGrad(lower_h={}, lower_c={}, shared_h=dh_sh_prev,
                       shared_c=dc_sh_prev)

    off = 0
    for m in config.modalities:
        name = m.name
        h = cache.lower_h_new[name]
        dh = d_state.lower_h[name] + dhcat[:, off:off + m.lower_hidden]
        off += m.lower_hidden

        # heads
        mean = cache.mean[name]
        dpre = d_out["mean"][name] * (1.0 - mean * mean)
        grads[f"{name}.head.w_mean"] += h.T @ dpre
        grads[f"{name}.head.b_mean"] += dpre.sum(axis=0)
        dh = dh + dpre @ params[f"{name}.head.w_mean"].T

        dpre = d_out["var"][name] * cache.var_sig[name]
        grads[f"{name}.head.w_var"] += h.T @ dpre
        grads[f"{name}.head.b_var"] += dpre.sum(axis=0)
        dh = dh + dpre @ params[f"{name}.head.w_var"].T

        dstep = d_out.get("step", {}).get(name)
        if dstep is not None:
            s = cache.step_sig[name]
            dpre = dstep[:, None] * (config.t_max - 1.0) * s * (1.0 - s)
            grads[f"{name}.head.w_step"] += h.T @ dpre
            grads[f"{name}.head.b_step"] += dpre.sum(axis=0)
            dh = dh + dpre @ params[f"{name}.head.w_step"].T

        # leaky integration then lower LSTM
        dh_tilde = (1.0 - a_low) * dh
        du, dh_rec, dc_prev, dwx, dwh, db = lstm_cell_backward(
            dh_tilde, d_state.lower_c[name], cache.lower[name],
            params[f"{name}.lstm.wx"], params[f"{name}.lstm.wh"])
        grads[f"{name}.lstm.wx"] += dwx
        grads[f"{name}.lstm.wh"] += dwh
        grads[f"{name}.lstm.b"] += db

        p = config.input_proj
        din, dfb = du[:, :p], du[:, p:]
        grads[f"{name}.w_in"] += cache.inputs[name].T @ din
        grads[f"{name}.b_in"] += din.sum(axis=0)
        grads[f"{name}.w_fb"] += cache.shared_h_prev.T @ dfb
        grads[f"{name}.b_fb"] += dfb.sum(axis=0)
        d_prev.shared_h = d_prev.shared_h + dfb @ params[f"{name}.w_fb"].T

        d_prev.lower_h[name] = a_low * dh + dh_rec
        d_prev.lower_c[name] = dc_prev
    return d_prev


def zero_grads(config: NetworkConfig) -> dict:
    return {name: np.zeros(shape) for name, shape, _ in param_spec(config)}


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def effective_horizon(output: PredictionOutput, t_max: int) -> int:
    """round-half-up of the max step head across modalities, clamped."""
    top = max(float(np.max(s)) for s in output.step.values())
    return int(min(t_max, max(1, np.floor(top + 0.5))))


def open_loop_rollout(params: dict, config: NetworkConfig, traj: dict,
                      initial_state: HiddenState | None = None):
    """Teacher-forced pass over a trajectory of per-modality (T, dim) arrays.

    Feeds observation t at each step, predicting t+1; returns the T-1 outputs
    and the state after every step.
    """
    lengths = {k: v.shape[0] for k, v in traj.items()}
    T = next(iter(lengths.values()))
    if any(n != T for n in lengths.values()) or T < 2:
        raise ValueError(f"trajectory lengths must match and be >= 2, got {lengths}")
    state = HiddenState.zeros(config, 1) if initial_state is None else initial_state
    outputs, states = [], []
    for t in range(T - 1):
        inputs = {k: v[t] for k, v in traj.items()}
        out, state = forward_step(params, config, inputs, state)
        outputs.append(out)
        states.append(state)
    return outputs, states


class FusedRollout:
    """Closed-loop rollout engine with the linear layers collapsed.

    Everything upstream of the gate nonlinearities is affine, so the input
    projection, feedback projection and LSTM input weights fold into one
    matrix per layer.  Sigmoid-gate columns are pre-scaled by 1/2 so a single
    tanh over the whole gate block yields both gate kinds
    (sigmoid(z) = tanh(z/2)/2 + 1/2).

    Build once per parameter value; step() advances concatenated state arrays
    (batch, sum lower hidden) / (batch, shared hidden) one step, feeding the
    previous means back as input.
    """

    def __init__(self, params: dict, config: NetworkConfig):
        self.config = config
        mods = config.modalities
        d_in = config.total_dim
        h_low = config.total_lower_hidden
        h_sh = config.shared_hidden
        self.a_low = 1.0 - 1.0 / config.tau_lower
        self.a_sh = 1.0 - 1.0 / config.tau_shared
        self.var_floor = config.var_floor

        z_cols = sum(4 * m.lower_hidden for m in mods)
        w = np.zeros((d_in + h_sh + h_low, z_cols))
        b = np.zeros(z_cols)
        # per-modality column block [i|f|o|g] and row blocks for x, shared h,
        # own lower h
        self.mod_slices = []   # (x_slice, z_slice, h_slice, H) per modality
        x_off = z_off = h_off = 0
        for m in mods:
            H = m.lower_hidden
            p = config.input_proj
            wx = params[f"{m.name}.lstm.wx"]
            zs = slice(z_off, z_off + 4 * H)
            w[x_off:x_off + m.dim, zs] = params[f"{m.name}.w_in"] @ wx[:p]
            w[d_in:d_in + h_sh, zs] = params[f"{m.name}.w_fb"] @ wx[p:]
            rows = slice(d_in + h_sh + h_off, d_in + h_sh + h_off + H)
            w[rows, zs] = params[f"{m.name}.lstm.wh"]
            b[zs] = (params[f"{m.name}.b_in"] @ wx[:p]
                     + params[f"{m.name}.b_fb"] @ wx[p:]
                     + params[f"{m.name}.lstm.b"])
            self.mod_slices.append((slice(x_off, x_off + m.dim), zs,
                                    slice(h_off, h_off + H), H))
            x_off += m.dim
            z_off += 4 * H
            h_off += H
        # halve the sigmoid-gate columns (first 3H of each modality block)
        for _, zs, _, H in self.mod_slices:
            w[:, zs.start:zs.start + 3 * H] *= 0.5
            b[zs.start:zs.start + 3 * H] *= 0.5
        self.w_low, self.b_low = w, b

        wxs = params["shared.lstm.wx"]
        w2 = np.zeros((h_low + h_sh, 4 * h_sh))
        w2[:h_low] = params["shared.w_in"] @ wxs
        w2[h_low:] = params["shared.lstm.wh"]
        b2 = params["shared.b_in"] @ wxs + params["shared.lstm.b"]
        w2[:, :3 * h_sh] *= 0.5
        b2[:3 * h_sh] *= 0.5
        self.w_sh, self.b_sh = w2, b2
        self.h_sh = h_sh

        # heads: block-diagonal [means | vars] plus the step column per modality
        wh2 = np.zeros((h_low, 2 * d_in + len(mods)))
        bh = np.zeros(2 * d_in + len(mods))
        for k, m in enumerate(mods):
            _, _, hs, _ = self.mod_slices[k]
            xs = self.mod_slices[k][0]
            wh2[hs, xs] = params[f"{m.name}.head.w_mean"]
            bh[xs] = params[f"{m.name}.head.b_mean"]
            wh2[hs, d_in + xs.start:d_in + xs.stop] = params[f"{m.name}.head.w_var"]
            bh[d_in + xs.start:d_in + xs.stop] = params[f"{m.name}.head.b_var"]
            wh2[hs, 2 * d_in + k] = params[f"{m.name}.head.w_step"][:, 0]
            bh[2 * d_in + k] = params[f"{m.name}.head.b_step"][0]
        self.w_head, self.b_head = wh2, bh
        self.d_in = d_in

    def pack_state(self, state: HiddenState):
        mods = self.config.modalities
        return (np.concatenate([state.lower_h[m.name] for m in mods], axis=1),
                np.concatenate([state.lower_c[m.name] for m in mods], axis=1),
                state.shared_h.copy(), state.shared_c.copy())

    def unpack_state(self, packed) -> HiddenState:
        h_low, c_low, h_sh, c_sh = packed
        lower_h, lower_c = {}, {}
        for m, (_, _, hs, _) in zip(self.config.modalities, self.mod_slices):
            lower_h[m.name] = h_low[:, hs].copy()
            lower_c[m.name] = c_low[:, hs].copy()
        return HiddenState(lower_h=lower_h, lower_c=lower_c,
                           shared_h=h_sh.copy(), shared_c=c_sh.copy())

    def decode(self, packed):
        """Heads from the current packed state: (mean, var, step) arrays of
        shape (B, total_dim) / (B, total_dim) / (B, n_modalities)."""
        heads = packed[0] @ self.w_head + self.b_head
        mean = np.tanh(heads[:, :self.d_in])
        var = np.logaddexp(0.0, heads[:, self.d_in:2 * self.d_in]) + self.var_floor
        step = 1.0 + (self.config.t_max - 1.0) * expit(heads[:, 2 * self.d_in:])
        return mean, var, step

    def step(self, x, packed):
        """x: (B, total_dim) inputs.  Returns (mean, var, step, new_packed)
        with mean/var as (B, total_dim) and step as (B, n_modalities) raw
        head values."""
        h_low, c_low, h_sh, c_sh = packed
        u = np.concatenate([x, h_sh, h_low], axis=1)
        t = np.tanh(u @ self.w_low + self.b_low)
        h_low_new = np.empty_like(h_low)
        c_low_new = np.empty_like(c_low)
        for _, zs, hs, H in self.mod_slices:
            block = t[:, zs]
            i = 0.5 * block[:, :H] + 0.5
            f = 0.5 * block[:, H:2 * H] + 0.5
            o = 0.5 * block[:, 2 * H:3 * H] + 0.5
            g = block[:, 3 * H:]
            c = f * c_low[:, hs] + i * g
            c_low_new[:, hs] = c
            h_low_new[:, hs] = self.a_low * h_low[:, hs] + (1.0 - self.a_low) * (o * np.tanh(c))

        hs_n = self.h_sh
        v = np.concatenate([h_low_new, h_sh], axis=1)
        t2 = np.tanh(v @ self.w_sh + self.b_sh)
        i = 0.5 * t2[:, :hs_n] + 0.5
        f = 0.5 * t2[:, hs_n:2 * hs_n] + 0.5
        o = 0.5 * t2[:, 2 * hs_n:3 * hs_n] + 0.5
        g = t2[:, 3 * hs_n:]
        c_sh_new = f * c_sh + i * g
        h_sh_new = self.a_sh * h_sh + (1.0 - self.a_sh) * (o * np.tanh(c_sh_new))

        new_packed = (h_low_new, c_low_new, h_sh_new, c_sh_new)
        mean, var, step = self.decode(new_packed)
        return mean, var, step, new_packed

    def means_of(self, output: PredictionOutput) -> np.ndarray:
        return np.concatenate(
            [output.mean[m.name] for m in self.config.modalities], axis=1)

    def split(self, cat: np.ndarray) -> dict:
        return {m.name: cat[:, xs] for m, (xs, _, _, _) in
                zip(self.config.modalities, self.mod_slices)}


def closed_loop_rollout(params: dict, config: NetworkConfig,
                        state: HiddenState, seed_output: PredictionOutput,
                        steps: int, fused: FusedRollout | None = None):
    """Feed the model its own predicted means for `steps` steps.

    The first step consumes seed_output's means; variances are decoded but
    never fed back.  Returns (list of PredictionOutput, final HiddenState).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if fused is None:
        fused = FusedRollout(params, config)
    packed = fused.pack_state(state)
    x = fused.means_of(seed_output)
    outputs = []
    for _ in range(steps):
        mean, var, step, packed = fused.step(x, packed)
        outputs.append(PredictionOutput(
            mean=fused.split(mean), var=fused.split(var),
            step={m.name: step[:, k] for k, m in enumerate(config.modalities)}))
        x = mean
    return outputs, fused.unpack_state(packed)
