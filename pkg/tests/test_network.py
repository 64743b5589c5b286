"""Hierarchical recurrent network tests.

The forward oracle below re-implements one full network step with plain
Python loops and math functions, independently of the vectorized code.
"""

import math

import numpy as np
import pytest

from foresight_rnn.network import (
    FusedRollout,
    HiddenState,
    ModalitySpec,
    NetworkConfig,
    PredictionOutput,
    StateGrad,
    backward_step,
    closed_loop_rollout,
    decode_heads,
    effective_horizon,
    forward_step,
    forward_step_cached,
    init_params,
    open_loop_rollout,
    param_spec,
    zero_grads,
)
from foresight_rnn.numerics import (
    finite_diff_gradcheck,
    gaussian_nll,
    gaussian_nll_grads,
)
from foresight_rnn.rng import RngStream


def tiny_config(**kw) -> NetworkConfig:
    defaults = dict(
        modalities=(ModalitySpec("joint", 2, 4), ModalitySpec("feat", 2, 4)),
        shared_hidden=4, input_proj=2, feedback_proj=2, shared_proj=3,
        t_max=10,
    )
    defaults.update(kw)
    return NetworkConfig(**defaults)


def zero_params(config):
    return {name: np.zeros(shape) for name, shape, _ in param_spec(config)}


def random_inputs(config, rng, batch=1):
    return {m.name: rng.child(m.name).uniform(-1.0, 1.0, (batch, m.dim))
            for m in config.modalities}


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_reproducible():
    cfg = tiny_config()
    a = init_params(cfg, RngStream(3, ("init",)))
    b = init_params(cfg, RngStream(3, ("init",)))
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_init_forget_bias_one():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(0, ("init",)))
    for name, arr in params.items():
        if name.endswith("lstm.b"):
            h = arr.shape[0] // 4
            assert np.all(arr[h:2 * h] == 1.0)
            assert np.all(arr[:h] == 0.0) and np.all(arr[2 * h:] == 0.0)
        elif ".b_" in name or name.endswith(("b_in",)):
            assert np.all(arr == 0.0), name


def test_init_fan_in_bound():
    cfg = NetworkConfig(
        modalities=(ModalitySpec("m", 100, 8),), shared_hidden=8,
        input_proj=4, feedback_proj=4, shared_proj=4)
    params = init_params(cfg, RngStream(1, ("init",)))
    assert np.all(np.abs(params["m.w_in"]) <= 0.1)  # fan_in 100


# ---------------------------------------------------------------------------
# forward step
# ---------------------------------------------------------------------------

def test_zero_network_head_values():
    cfg = tiny_config()
    params = zero_params(cfg)
    out, _ = forward_step(params, cfg, {"joint": np.zeros(2), "feat": np.zeros(2)},
                          HiddenState.zeros(cfg))
    for m in ("joint", "feat"):
        assert np.all(out.mean[m] == 0.0)
        assert np.allclose(out.var[m], math.log(2.0) + 1e-6, atol=1e-12)
        assert np.allclose(out.step[m], 1.0 + 9 * 0.5)


def test_head_ranges_arbitrary_inputs():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(5, ("init",)))
    rng = RngStream(6, ("inputs",))
    state = HiddenState.zeros(cfg)
    for t in range(30):
        inputs = {m.name: 30.0 * rng.child(t, m.name).normal((1, m.dim))
                  for m in cfg.modalities}
        out, state = forward_step(params, cfg, inputs, state)
        for m in cfg.modalities:
            assert np.all(np.abs(out.mean[m.name]) < 1.0)
            assert np.all(out.var[m.name] >= 1e-6)
            assert np.all(out.step[m.name] >= 1.0)
            assert np.all(out.step[m.name] <= cfg.t_max)


def test_forward_rejects_nonfinite():
    cfg = tiny_config()
    params = zero_params(cfg)
    bad = {"joint": np.array([np.nan, 0.0]), "feat": np.zeros(2)}
    with pytest.raises(ValueError, match="joint"):
        forward_step(params, cfg, bad, HiddenState.zeros(cfg))


def test_forward_rejects_wrong_width():
    cfg = tiny_config()
    params = zero_params(cfg)
    with pytest.raises(ValueError, match="feat"):
        forward_step(params, cfg, {"joint": np.zeros(2), "feat": np.zeros(3)},
                     HiddenState.zeros(cfg))


# ---------------------------------------------------------------------------
# scalar-loop oracle for a full step
# ---------------------------------------------------------------------------

def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _scalar_lstm(u, h, c, wx, wh, b):
    H = len(h)
    h_new, c_new = [0.0] * H, [0.0] * H
    for j in range(H):
        z = []
        for gate in range(4):
            col = gate * H + j
            acc = b[col]
            for a in range(len(u)):
                acc += u[a] * wx[a, col]
            for a in range(H):
                acc += h[a] * wh[a, col]
            z.append(acc)
        i, f, o, g = _sig(z[0]), _sig(z[1]), _sig(z[2]), math.tanh(z[3])
        c_new[j] = f * c[j] + i * g
        h_new[j] = o * math.tanh(c_new[j])
    return h_new, c_new


def _affine(x, w, b):
    return [b[j] + sum(x[a] * w[a, j] for a in range(len(x)))
            for j in range(w.shape[1])]


def _scalar_forward_oracle(params, cfg, inputs, state):
    """Whole-network step on plain floats; batch size 1."""
    a_low = 1.0 - 1.0 / cfg.tau_lower
    a_sh = 1.0 - 1.0 / cfg.tau_shared
    h_sh = list(state.shared_h[0])
    new_lower = {}
    for m in cfg.modalities:
        x = list(inputs[m.name])
        proj = _affine(x, params[f"{m.name}.w_in"], params[f"{m.name}.b_in"])
        fb = _affine(h_sh, params[f"{m.name}.w_fb"], params[f"{m.name}.b_fb"])
        h_t, c_t = _scalar_lstm(
            proj + fb, list(state.lower_h[m.name][0]),
            list(state.lower_c[m.name][0]),
            params[f"{m.name}.lstm.wx"], params[f"{m.name}.lstm.wh"],
            params[f"{m.name}.lstm.b"])
        h_int = [a_low * hp + (1.0 - a_low) * ht
                 for hp, ht in zip(state.lower_h[m.name][0], h_t)]
        new_lower[m.name] = (h_int, c_t)

    hcat = []
    for m in cfg.modalities:
        hcat += new_lower[m.name][0]
    s_in = _affine(hcat, params["shared.w_in"], params["shared.b_in"])
    h_sh_t, c_sh_t = _scalar_lstm(
        s_in, h_sh, list(state.shared_c[0]),
        params["shared.lstm.wx"], params["shared.lstm.wh"], params["shared.lstm.b"])
    h_sh_new = [a_sh * hp + (1.0 - a_sh) * ht for hp, ht in zip(h_sh, h_sh_t)]

    mean, var, step = {}, {}, {}
    for m in cfg.modalities:
        h = new_lower[m.name][0]
        mean[m.name] = [math.tanh(v) for v in
                        _affine(h, params[f"{m.name}.head.w_mean"], params[f"{m.name}.head.b_mean"])]
        var[m.name] = [math.log(1.0 + math.exp(v)) + cfg.var_floor for v in
                       _affine(h, params[f"{m.name}.head.w_var"], params[f"{m.name}.head.b_var"])]
        pre = _affine(h, params[f"{m.name}.head.w_step"], params[f"{m.name}.head.b_step"])
        step[m.name] = 1.0 + (cfg.t_max - 1.0) * _sig(pre[0])
    return mean, var, step, new_lower, h_sh_new, c_sh_t


def test_forward_matches_scalar_oracle():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(9, ("init",)))
    rng = RngStream(10, ("state",))
    state = HiddenState(
        lower_h={m.name: rng.child(m.name, "h").normal((1, m.lower_hidden))
                 for m in cfg.modalities},
        lower_c={m.name: rng.child(m.name, "c").normal((1, m.lower_hidden))
                 for m in cfg.modalities},
        shared_h=rng.child("sh").normal((1, cfg.shared_hidden)),
        shared_c=rng.child("sc").normal((1, cfg.shared_hidden)),
    )
    inputs = {m.name: rng.child(m.name, "x").uniform(-1, 1, m.dim)
              for m in cfg.modalities}
    out, new_state = forward_step(params, cfg, inputs, state)
    mean, var, step, new_lower, h_sh, c_sh = _scalar_forward_oracle(
        params, cfg, inputs, state)
    for m in cfg.modalities:
        assert np.allclose(out.mean[m.name][0], mean[m.name], atol=1e-9)
        assert np.allclose(out.var[m.name][0], var[m.name], atol=1e-9)
        assert abs(out.step[m.name][0] - step[m.name]) < 1e-9
        assert np.allclose(new_state.lower_h[m.name][0], new_lower[m.name][0], atol=1e-9)
        assert np.allclose(new_state.lower_c[m.name][0], new_lower[m.name][1], atol=1e-9)
    assert np.allclose(new_state.shared_h[0], h_sh, atol=1e-9)
    assert np.allclose(new_state.shared_c[0], c_sh, atol=1e-9)


def test_decode_heads_matches_forward_heads():
    # Re-decoding heads from the state produced by forward_step gives the
    # same values the step reported.
    cfg = tiny_config()
    params = init_params(cfg, RngStream(12, ("init",)))
    inputs = random_inputs(cfg, RngStream(13, ("x",)))
    out, state = forward_step(params, cfg, inputs, HiddenState.zeros(cfg))
    again = decode_heads(params, cfg, state)
    for m in cfg.modalities:
        assert np.array_equal(out.mean[m.name], again.mean[m.name])
        assert np.array_equal(out.var[m.name], again.var[m.name])
        assert np.array_equal(out.step[m.name], again.step[m.name])


# ---------------------------------------------------------------------------
# timescale separation / modality symmetry
# ---------------------------------------------------------------------------

def test_shared_layer_decays_slower():
    # Matched shapes so the two layers can carry identical weights; measure
    # each layer's self-sensitivity to an epsilon perturbation of its own h
    # under zero input.
    cfg = NetworkConfig(
        modalities=(ModalitySpec("m", 2, 6),), shared_hidden=6,
        input_proj=2, feedback_proj=2, shared_proj=4,
        tau_lower=2.0, tau_shared=12.0)
    params = init_params(cfg, RngStream(20, ("init",)))
    params["shared.lstm.wh"] = params["m.lstm.wh"].copy()
    params["shared.lstm.b"] = params["m.lstm.b"].copy()
    eps = 1e-4
    zero_in = {"m": np.zeros((1, 2))}
    base_state = HiddenState.zeros(cfg)
    _, base = forward_step(params, cfg, zero_in, base_state)

    bumped = HiddenState.zeros(cfg)
    bumped.lower_h["m"] = bumped.lower_h["m"] + eps
    _, s1 = forward_step(params, cfg, zero_in, bumped)
    lower_sens = np.linalg.norm(s1.lower_h["m"] - base.lower_h["m"]) / (eps * np.sqrt(6))

    bumped = HiddenState.zeros(cfg)
    bumped.shared_h = bumped.shared_h + eps
    _, s2 = forward_step(params, cfg, zero_in, bumped)
    shared_sens = np.linalg.norm(s2.shared_h - base.shared_h) / (eps * np.sqrt(6))

    assert abs(shared_sens - 1.0) < abs(lower_sens - 1.0)
    assert shared_sens > lower_sens


def test_modality_order_swap_permutes_outputs():
    cfg_ab = tiny_config()
    cfg_ba = NetworkConfig(
        modalities=(cfg_ab.modalities[1], cfg_ab.modalities[0]),
        shared_hidden=4, input_proj=2, feedback_proj=2, shared_proj=3)
    params = init_params(cfg_ab, RngStream(30, ("init",)))
    swapped = dict(params)
    # shared.w_in rows follow modality order: [joint block | feat block]
    hj = cfg_ab.modalities[0].lower_hidden
    swapped["shared.w_in"] = np.vstack(
        [params["shared.w_in"][hj:], params["shared.w_in"][:hj]])
    inputs = random_inputs(cfg_ab, RngStream(31, ("x",)))
    out1, s1 = forward_step(params, cfg_ab, inputs, HiddenState.zeros(cfg_ab))
    out2, s2 = forward_step(swapped, cfg_ba, inputs, HiddenState.zeros(cfg_ba))
    for m in ("joint", "feat"):
        assert np.allclose(out1.mean[m], out2.mean[m], atol=1e-12)
        assert np.allclose(out1.var[m], out2.var[m], atol=1e-12)
    assert np.allclose(s1.shared_h, s2.shared_h, atol=1e-12)


# ---------------------------------------------------------------------------
# open-loop rollout
# ---------------------------------------------------------------------------

def _random_traj(cfg, rng, T):
    return {m.name: rng.child(m.name).uniform(-1, 1, (T, m.dim))
            for m in cfg.modalities}


def test_open_loop_length_two():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(40, ("init",)))
    traj = _random_traj(cfg, RngStream(41, ("t",)), 2)
    outputs, states = open_loop_rollout(params, cfg, traj)
    assert len(outputs) == 1 and len(states) == 1


def test_open_loop_causality():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(42, ("init",)))
    traj = _random_traj(cfg, RngStream(43, ("t",)), 12)
    out_a, _ = open_loop_rollout(params, cfg, traj)
    mutated = {k: v.copy() for k, v in traj.items()}
    mutated["joint"][8] = 0.99
    out_b, _ = open_loop_rollout(params, cfg, mutated)
    for t in range(8):  # outputs 0..7 consumed inputs 0..7 only
        for m in ("joint", "feat"):
            assert np.array_equal(out_a[t].mean[m], out_b[t].mean[m])
    assert not np.array_equal(out_a[8].mean["joint"], out_b[8].mean["joint"])


def test_open_loop_replay_consistency():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(44, ("init",)))
    traj = _random_traj(cfg, RngStream(45, ("t",)), 8)
    outputs, states = open_loop_rollout(params, cfg, traj)
    for t in range(1, 7):
        out, _ = forward_step(params, cfg,
                              {k: v[t] for k, v in traj.items()}, states[t - 1])
        for m in ("joint", "feat"):
            assert np.array_equal(out.mean[m], outputs[t].mean[m])
            assert np.array_equal(out.var[m], outputs[t].var[m])


# ---------------------------------------------------------------------------
# closed-loop rollout (fused path)
# ---------------------------------------------------------------------------

def _random_state(cfg, rng, batch=1):
    return HiddenState(
        lower_h={m.name: 0.5 * rng.child(m.name, "h").normal((batch, m.lower_hidden))
                 for m in cfg.modalities},
        lower_c={m.name: 0.5 * rng.child(m.name, "c").normal((batch, m.lower_hidden))
                 for m in cfg.modalities},
        shared_h=0.5 * rng.child("sh").normal((batch, cfg.shared_hidden)),
        shared_c=0.5 * rng.child("sc").normal((batch, cfg.shared_hidden)),
    )


def test_closed_loop_one_step_is_forward_on_seed_means():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(50, ("init",)))
    state = _random_state(cfg, RngStream(51, ("s",)))
    seed = decode_heads(params, cfg, state)
    rolled, final = closed_loop_rollout(params, cfg, state, seed, 1)
    direct_out, direct_state = forward_step(params, cfg, seed.mean, state)
    assert len(rolled) == 1
    for m in ("joint", "feat"):
        assert np.allclose(rolled[0].mean[m], direct_out.mean[m], atol=1e-10)
        assert np.allclose(rolled[0].var[m], direct_out.var[m], atol=1e-10)
        assert np.allclose(rolled[0].step[m], direct_out.step[m], atol=1e-10)
        assert np.allclose(final.lower_h[m], direct_state.lower_h[m], atol=1e-10)
    assert np.allclose(final.shared_h, direct_state.shared_h, atol=1e-10)


def test_closed_loop_matches_stepwise_feedback_loop():
    # Fused rollout vs. explicitly feeding means through forward_step.
    cfg = tiny_config()
    params = init_params(cfg, RngStream(52, ("init",)))
    state = _random_state(cfg, RngStream(53, ("s",)), batch=3)
    seed = decode_heads(params, cfg, state)
    rolled, _ = closed_loop_rollout(params, cfg, state, seed, 10)
    ref_state, x = state, seed.mean
    for t in range(10):
        out, ref_state = forward_step(params, cfg, x, ref_state)
        for m in ("joint", "feat"):
            assert np.allclose(rolled[t].mean[m], out.mean[m], atol=1e-9), t
            assert np.allclose(rolled[t].var[m], out.var[m], atol=1e-9), t
        x = out.mean


def test_closed_loop_deterministic():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(54, ("init",)))
    state = _random_state(cfg, RngStream(55, ("s",)))
    seed = decode_heads(params, cfg, state)
    a, _ = closed_loop_rollout(params, cfg, state, seed, 5)
    b, _ = closed_loop_rollout(params, cfg, state, seed, 5)
    for t in range(5):
        for m in ("joint", "feat"):
            assert np.array_equal(a[t].mean[m], b[t].mean[m])


def test_fused_rollout_reusable_across_states():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(56, ("init",)))
    fused = FusedRollout(params, cfg)
    for k in range(3):
        state = _random_state(cfg, RngStream(57, ("s", k)))
        seed = decode_heads(params, cfg, state)
        a, _ = closed_loop_rollout(params, cfg, state, seed, 4, fused=fused)
        b, _ = closed_loop_rollout(params, cfg, state, seed, 4)
        for m in ("joint", "feat"):
            assert np.array_equal(a[3].mean[m], b[3].mean[m])


# ---------------------------------------------------------------------------
# effective horizon
# ---------------------------------------------------------------------------

def _output_with_steps(steps):
    return PredictionOutput(
        mean={}, var={},
        step={f"m{k}": np.array([v]) for k, v in enumerate(steps)})


def test_effective_horizon_rounding():
    assert effective_horizon(_output_with_steps([3.2, 7.8]), 10) == 8
    assert effective_horizon(_output_with_steps([1.0, 1.0]), 10) == 1
    assert effective_horizon(_output_with_steps([10.0, 2.0]), 10) == 10
    assert effective_horizon(_output_with_steps([4.5]), 10) == 5  # half rounds up


# ---------------------------------------------------------------------------
# BPTT gradient check over a short teacher-forced sequence
# ---------------------------------------------------------------------------

def _sequence_loss(params, cfg, traj):
    state = HiddenState.zeros(cfg, 1)
    total = 0.0
    T = next(iter(traj.values())).shape[0]
    for t in range(T - 1):
        out, state = forward_step(params, cfg, {k: v[t] for k, v in traj.items()}, state)
        for m in cfg.modalities:
            total += gaussian_nll(out.mean[m.name][0], out.var[m.name][0],
                                  traj[m.name][t + 1])
    return total


def _sequence_grads(params, cfg, traj):
    state = HiddenState.zeros(cfg, 1)
    caches, outs = [], []
    T = next(iter(traj.values())).shape[0]
    for t in range(T - 1):
        out, state, cache = forward_step_cached(
            params, cfg, {k: v[t] for k, v in traj.items()}, state)
        caches.append(cache)
        outs.append(out)
    grads = zero_grads(cfg)
    d_state = StateGrad.zeros_like(state)
    for t in reversed(range(T - 1)):
        d_out = {"mean": {}, "var": {}}
        for m in cfg.modalities:
            dmean, dvar = gaussian_nll_grads(
                outs[t].mean[m.name][0], outs[t].var[m.name][0], traj[m.name][t + 1])
            d_out["mean"][m.name] = dmean[None, :]
            d_out["var"][m.name] = dvar[None, :]
        d_state = backward_step(params, cfg, caches[t], d_out, d_state, grads)
    return grads


def test_bptt_matches_finite_differences():
    cfg = tiny_config()
    params = init_params(cfg, RngStream(60, ("init",)))
    traj = _random_traj(cfg, RngStream(61, ("t",)), 6)

    def loss_fn(p):
        return _sequence_loss(p, cfg, traj)

    grads = _sequence_grads(params, cfg, traj)
    report = finite_diff_gradcheck(loss_fn, params, grads, epsilon=1e-5,
                                   max_coords=40)
    assert report.max_rel_error <= 1e-4, str(report)
