"""Refinement module: adaptive sigma, candidate sampling, scoring, selection."""

import numpy as np
import pytest

from foresight_rnn.foresight import (
    EpisodeStats,
    ForesightConfig,
    draw_candidate_noise,
    foresight_refine,
    noise_intensity,
    noise_sigma,
    refine_batch,
    sample_candidates,
    score_candidate,
)
from foresight_rnn.network import (
    FusedRollout,
    HiddenState,
    ModalitySpec,
    NetworkConfig,
    decode_heads,
    init_params,
)
from foresight_rnn.rng import RngStream


def tiny_net() -> NetworkConfig:
    return NetworkConfig(
        modalities=(ModalitySpec("joint", 2, 5), ModalitySpec("feat", 3, 5)),
        shared_hidden=6, input_proj=2, feedback_proj=2, shared_proj=3)


def make_model(seed=0):
    net = tiny_net()
    params = init_params(net, RngStream(seed, ("init",)))
    return net, params


def random_state(net, rng, batch=1):
    return HiddenState(
        lower_h={m.name: 0.3 * rng.child(m.name, "h").normal((batch, m.lower_hidden))
                 for m in net.modalities},
        lower_c={m.name: 0.3 * rng.child(m.name, "c").normal((batch, m.lower_hidden))
                 for m in net.modalities},
        shared_h=0.3 * rng.child("sh").normal((batch, net.shared_hidden)),
        shared_c=0.3 * rng.child("sc").normal((batch, net.shared_hidden)),
    )


# ---------------------------------------------------------------------------
# noise intensity
# ---------------------------------------------------------------------------

def _var_dict(v):
    return {"m": np.array([[v]])}


def test_sigma_first_step_is_midpoint():
    cfg = ForesightConfig()
    stats = EpisodeStats.fresh(1)
    sigma = noise_sigma(_var_dict(0.37), stats, cfg)
    assert np.allclose(sigma, 0.10)


def test_sigma_endpoints():
    cfg = ForesightConfig()
    stats = EpisodeStats.fresh(1)
    noise_sigma(_var_dict(0.2), stats, cfg)   # establishes min=max=0.2
    noise_sigma(_var_dict(0.8), stats, cfg)   # now max=0.8
    assert np.allclose(noise_sigma(_var_dict(0.2), stats, cfg), 0.05)
    assert np.allclose(noise_sigma(_var_dict(0.8), stats, cfg), 0.15)


def test_sigma_monotone_and_bounded():
    cfg = ForesightConfig()
    stats = EpisodeStats.fresh(1)
    noise_sigma(_var_dict(0.0), stats, cfg)
    noise_sigma(_var_dict(1.0), stats, cfg)
    prev = -1.0
    for v in np.linspace(0.0, 1.0, 21):
        s = float(noise_sigma(_var_dict(v), stats, cfg)[0])
        assert 0.05 <= s <= 0.15
        assert s >= prev - 1e-12
        prev = s


def test_sigma_new_extremes_extend_running_range():
    cfg = ForesightConfig()
    stats = EpisodeStats.fresh(1)
    noise_sigma(_var_dict(0.4), stats, cfg)
    noise_sigma(_var_dict(0.6), stats, cfg)
    # a value above the running max becomes the new max -> sigma_max
    assert np.allclose(noise_sigma(_var_dict(0.9), stats, cfg), 0.15)
    assert np.allclose(noise_sigma(_var_dict(0.1), stats, cfg), 0.05)


def test_noise_intensity_batched_rows_independent():
    stats = EpisodeStats.fresh(2)
    var = {"m": np.array([[0.2], [0.9]])}
    norm = noise_intensity(var, stats)
    assert np.allclose(norm, [0.5, 0.5])  # both rows on their first step
    var2 = {"m": np.array([[0.4], [0.3]])}
    norm2 = noise_intensity(var2, stats)
    assert np.allclose(norm2, [1.0, 0.0])  # row 0 new max, row 1 new min


# ---------------------------------------------------------------------------
# candidate sampling
# ---------------------------------------------------------------------------

def test_candidates_sigma_zero_identical():
    net, params = make_model()
    state = random_state(net, RngStream(1, ("s",)))
    cands = sample_candidates(state, 0.0, 4, RngStream(2, ("n",)))
    for c in cands:
        assert np.array_equal(c.shared_h, state.shared_h)
        assert np.array_equal(c.shared_c, state.shared_c)


def test_single_candidate_is_unperturbed():
    net, _ = make_model()
    state = random_state(net, RngStream(3, ("s",)))
    cands = sample_candidates(state, 0.1, 1, RngStream(4, ("n",)))
    assert len(cands) == 1
    assert np.array_equal(cands[0].shared_h, state.shared_h)


def test_candidates_perturb_only_shared_h():
    net, _ = make_model()
    state = random_state(net, RngStream(5, ("s",)))
    cands = sample_candidates(state, 0.1, 5, RngStream(6, ("n",)))
    assert np.array_equal(cands[0].shared_h, state.shared_h)
    for c in cands[1:]:
        assert not np.array_equal(c.shared_h, state.shared_h)
        assert np.array_equal(c.shared_c, state.shared_c)
        for m in net.modalities:
            assert np.array_equal(c.lower_h[m.name], state.lower_h[m.name])
            assert np.array_equal(c.lower_c[m.name], state.lower_c[m.name])


def test_candidate_noise_block_prefix_matches_single_draw():
    # Row 0 of the candidate noise block equals the one-row draw a noise-only
    # variant makes from the same stream.
    cfg = ForesightConfig()
    for seed in range(10):
        block = draw_candidate_noise(RngStream(seed, ("noise", 3)), cfg, 6)
        single = RngStream(seed, ("noise", 3)).normal(6)
        assert block.shape == (4, 6)
        assert np.array_equal(block[0], single)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

class _Out:
    def __init__(self, var):
        self.var = var


def test_score_zero_when_unchanged():
    v = {"a": np.array([[0.3, 0.4]])}
    assert np.allclose(score_candidate([_Out(v)], _Out(v)), 0.0)


def test_score_arithmetic():
    init = _Out({"a": np.array([[0.2, 0.2]])})
    roll = [_Out({"a": np.array([[0.05, 0.05]])})]
    assert np.allclose(score_candidate(roll, init), 0.3)


def test_score_negative_when_variance_grows():
    init = _Out({"a": np.array([[0.1, 0.1]])})
    roll = [_Out({"a": np.array([[0.5, 0.2]])})]
    assert float(score_candidate(roll, init)[0]) < 0.0


def test_score_uses_last_rollout_step():
    init = _Out({"a": np.array([[1.0]])})
    roll = [_Out({"a": np.array([[5.0]])}), _Out({"a": np.array([[0.25]])})]
    assert np.allclose(score_candidate(roll, init), 0.75)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def _refine_once(seed=0, batch=1, **cfg_kw):
    net, params = make_model(seed)
    fcfg = ForesightConfig(t_max=4, **cfg_kw)
    state = random_state(net, RngStream(seed, ("state",)), batch)
    last = decode_heads(params, net, state)
    new_state, results, diag = foresight_refine(
        params, net, fcfg, state, last, RngStream(seed, ("noise",)))
    return net, params, state, new_state, results, diag


def test_refine_single_candidate_identity():
    _, _, state, new_state, results, diag = _refine_once(n_candidates=1)
    assert np.array_equal(new_state.shared_h, state.shared_h)
    assert np.array_equal(new_state.shared_c, state.shared_c)
    assert len(results) == 1
    assert diag.selected[0] == 0


def test_refine_selected_score_is_max():
    for seed in range(5):
        _, _, _, _, results, diag = _refine_once(seed)
        scores = np.array([float(r.score[0]) for r in results])
        assert np.allclose(diag.scores[0], scores)
        sel = int(diag.selected[0])
        assert scores[sel] == scores.max()


def test_refine_changes_only_shared_h():
    net, _, state, new_state, _, diag = _refine_once(seed=2)
    for m in net.modalities:
        assert np.array_equal(new_state.lower_h[m.name], state.lower_h[m.name])
        assert np.array_equal(new_state.lower_c[m.name], state.lower_c[m.name])
    assert np.array_equal(new_state.shared_c, state.shared_c)
    if diag.selected[0] != 0:
        assert not np.array_equal(new_state.shared_h, state.shared_h)


def test_refine_deterministic():
    a = _refine_once(seed=7)
    b = _refine_once(seed=7)
    assert np.array_equal(a[3].shared_h, b[3].shared_h)
    assert np.array_equal(a[5].scores, b[5].scores)
    assert np.array_equal(a[5].selected, b[5].selected)


def test_refine_selected_state_matches_candidate():
    _, _, _, new_state, results, diag = _refine_once(seed=3)
    sel = int(diag.selected[0])
    assert np.array_equal(new_state.shared_h,
                          results[sel].perturbed_state.shared_h)


def test_candidate_result_score_consistency():
    net, _, _, _, results, _ = _refine_once(seed=4)
    for r in results:
        total = sum(np.sum(r.initial_variance[m.name] - r.final_variance[m.name])
                    for m in net.modalities)
        assert np.allclose(float(r.score[0]), total, atol=1e-9)


def test_argmax_invariant_under_positive_scaling():
    _, _, _, _, _, diag = _refine_once(seed=5)
    scores = diag.scores[0]
    assert np.argmax(scores) == np.argmax(scores * 3.7)
    assert np.argmax(scores) == np.argmax(scores * 0.001)


def test_selected_final_variance_not_worse_than_average():
    # argmax of the reduction score is argmin of final variance, so the
    # selected candidate's simulated final variance can never exceed the
    # candidate average.
    for seed in range(10):
        net, _, _, _, results, diag = _refine_once(seed=seed)
        finals = np.array([
            np.mean(np.concatenate([r.final_variance[m.name].ravel()
                                    for m in net.modalities]))
            for r in results])
        assert finals[int(diag.selected[0])] <= finals.mean() + 1e-12


def test_forced_index_bypasses_selection():
    net, params = make_model(11)
    fcfg = ForesightConfig(t_max=4, forced_index=2)
    state = random_state(net, RngStream(11, ("state",)))
    last = decode_heads(params, net, state)
    stream = RngStream(11, ("noise",))
    new_state, _, diag = foresight_refine(params, net, fcfg, state, last, stream)
    assert diag.selected[0] == 2
    # manual reconstruction: candidate 2 carries noise row 1 at sigma=0.10
    block = draw_candidate_noise(RngStream(11, ("noise", 0)), fcfg, net.shared_hidden)
    expect = state.shared_h + 0.10 * block[1]
    assert np.array_equal(new_state.shared_h, expect)


def test_trigger_threshold_suppresses_noise():
    # First step normalizes to 0.5; a higher trigger masks sigma to zero and
    # the refinement becomes the identity.
    net, params = make_model(12)
    fcfg = ForesightConfig(t_max=3, trigger_threshold=0.9)
    state = random_state(net, RngStream(12, ("state",)))
    last = decode_heads(params, net, state)
    new_state, _, diag = foresight_refine(
        params, net, fcfg, state, last, RngStream(12, ("noise",)))
    assert np.allclose(diag.sigma, 0.0)
    assert np.array_equal(new_state.shared_h, state.shared_h)


def test_refine_batch_rows_match_single_rows():
    # Refining a 3-row batch equals refining each row alone with the same
    # per-row noise.
    net, params = make_model(13)
    fcfg = ForesightConfig(t_max=4)
    state = random_state(net, RngStream(13, ("state",)), batch=3)
    fused = FusedRollout(params, net)
    sigma = np.array([0.05, 0.10, 0.15])
    noise = np.stack([draw_candidate_noise(RngStream(13, ("n", b)), fcfg,
                                           net.shared_hidden)
                      for b in range(3)])
    new_state, diag, _ = refine_batch(params, net, fcfg, state, sigma, noise,
                                      fused=fused)
    for b in range(3):
        row = HiddenState(
            lower_h={k: v[b:b + 1] for k, v in state.lower_h.items()},
            lower_c={k: v[b:b + 1] for k, v in state.lower_c.items()},
            shared_h=state.shared_h[b:b + 1], shared_c=state.shared_c[b:b + 1])
        ns, d, _ = refine_batch(params, net, fcfg, row, sigma[b:b + 1],
                                noise[b:b + 1], fused=fused)
        assert d.selected[0] == diag.selected[b]
        assert np.allclose(ns.shared_h[0], new_state.shared_h[b], atol=1e-12)
        assert np.allclose(d.scores[0], diag.scores[b], atol=1e-12)


def test_diagnostics_record_is_json_ready():
    import json
    _, _, _, _, _, diag = _refine_once(seed=14)
    rec = diag.record(0)
    text = json.dumps(rec)
    back = json.loads(text)
    assert back["selected_index"] == int(diag.selected[0])
    assert len(back["scores"]) == 5
    assert 0.05 <= back["sigma"] <= 0.15


def test_config_validation():
    with pytest.raises(ValueError):
        ForesightConfig(n_candidates=0)
    with pytest.raises(ValueError):
        ForesightConfig(sigma_min=0.2, sigma_max=0.1)
    with pytest.raises(ValueError):
        ForesightConfig(forced_index=5, n_candidates=5)
    with pytest.raises(ValueError):
        ForesightConfig(perturb_target="lower_h")
