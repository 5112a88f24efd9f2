"""Episode runner: mode semantics, reset statelessness, divergence
containment, scale averaging, and the gradient-alignment diagnostics."""

import numpy as np
import pytest

from dyntta.data import Episode, episode_seed, gen_synthetic, synthetic_tokenizer
from dyntta.lm import ModelConfig, answer_nll, init_lm
from dyntta.lora import init_lora, prompt_grad, scaled_step
from dyntta.scalenet import ScaleNetParams, init_scalenet
from dyntta.tta import (
    StepRecord,
    TtaConfig,
    TtaTrace,
    adapt_episode,
    average_scales,
    cross_gradient,
    read_traces_jsonl,
    step_scales,
    taylor_residual,
    write_traces_jsonl,
)


@pytest.fixture(scope="module")
def tiny():
    tok = synthetic_tokenizer()
    cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=96)
    params = init_lm(cfg, seed=0, dtype=np.float64)
    episodes = gen_synthetic("kv_recall", 8, seed=0, tokenizer=tok)
    return params, episodes


def _psi_for(params, out_dim=None, seed=0, zero=True):
    feature_dim = 2 * params.cfg.d_model + 2
    out = out_dim if out_dim is not None else 2 * params.cfg.n_layers
    psi = init_scalenet(feature_dim, out, hidden_dim=8, k_max=5, seed=seed, dtype=np.float64)
    if not zero:
        rng = np.random.default_rng(seed + 1)
        psi.w2 = rng.standard_normal(psi.w2.shape) * 0.3
        psi.b2 = rng.standard_normal(psi.b2.shape) * 0.3
    return psi


# -- adapt_episode -------------------------------------------------------------------


def test_k0_answer_nll_equals_base_model(tiny):
    params, episodes = tiny
    ep = episodes[0]
    cfg = TtaConfig(mode="fixed", k_steps=0)
    trace = adapt_episode(params, None, ep, cfg, seed=1)
    assert trace.steps == []
    assert not trace.diverged
    base = float(answer_nll(params.tensors(), None, ep.prompt_tokens, ep.answer_tokens).data)
    assert trace.answer_nll == pytest.approx(base, rel=0, abs=1e-12)


def test_zero_net_layerwise_is_trace_identical_to_fixed(tiny):
    params, episodes = tiny
    ep = episodes[1]
    psi = _psi_for(params)  # zero output head: every scale is exactly 1
    rate = 3e-2
    lw = adapt_episode(params, psi, ep, TtaConfig(mode="layer-wise", eta=rate, k_steps=3), seed=7)
    fx = adapt_episode(params, None, ep, TtaConfig(mode="fixed", fixed_eta=rate, k_steps=3), seed=7)
    assert lw.answer_nll == fx.answer_nll
    for a, b in zip(lw.steps, fx.steps):
        assert a.prompt_nll == b.prompt_nll
        np.testing.assert_array_equal(a.scales, b.scales)
        assert np.all(a.scales == 1.0)


def test_small_step_strictly_decreases_prompt_nll(tiny):
    params, episodes = tiny
    ep = episodes[2]
    trace = adapt_episode(params, None, ep, TtaConfig(mode="fixed", fixed_eta=1e-2, k_steps=2), seed=3)
    assert not trace.diverged
    assert trace.steps[1].prompt_nll < trace.steps[0].prompt_nll


def test_trace_completeness_and_ordering(tiny):
    params, episodes = tiny
    ep = episodes[3]
    k = 4
    trace = adapt_episode(params, None, ep, TtaConfig(mode="fixed", k_steps=k), seed=3)
    assert not trace.diverged
    assert len(trace.steps) == k
    assert [s.k for s in trace.steps] == list(range(1, k + 1))
    n_blocks = 2 * params.cfg.n_layers
    for s in trace.steps:
        assert s.scales.shape == (n_blocks,)
        assert len(s.grads) == n_blocks
        assert np.isfinite(s.prompt_nll)
        assert s.h.shape == (2 * params.cfg.d_model,)
    assert len(trace.final_block_norms) == n_blocks
    assert trace.seed == episode_seed(3, ep.id)


def test_statelessness_under_episode_permutation(tiny):
    params, episodes = tiny
    cfg = TtaConfig(mode="fixed", k_steps=2)

    def run(order):
        return {ep.id: adapt_episode(params, None, ep, cfg, seed=11) for ep in order}

    fwd = run(episodes[:5])
    rev = run(list(reversed(episodes[:5])))
    for eid, a in fwd.items():
        b = rev[eid]
        assert a.answer_nll == b.answer_nll
        assert a.seed == b.seed
        for sa, sb in zip(a.steps, b.steps):
            assert sa.prompt_nll == sb.prompt_nll
            np.testing.assert_array_equal(sa.grads.blocks[0][0], sb.grads.blocks[0][0])


def test_divergence_is_contained(tiny):
    params, episodes = tiny
    # a float32 model so an absurd rate actually overflows the attention logits
    cfg32 = ModelConfig(
        vocab_size=params.cfg.vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=96
    )
    params32 = init_lm(cfg32, seed=0, dtype=np.float32)
    bad = TtaConfig(mode="fixed", fixed_eta=1e30, k_steps=3)
    trace = adapt_episode(params32, None, episodes[0], bad, seed=5)
    assert trace.diverged
    assert len(trace.steps) < 3  # truncated at the step that went non-finite
    assert trace.answer_nll is None

    # a sibling episode run afterwards is bitwise-unaffected
    good = TtaConfig(mode="fixed", fixed_eta=1e-2, k_steps=2)
    alone = adapt_episode(params32, None, episodes[1], good, seed=5)
    after = adapt_episode(params32, None, episodes[1], good, seed=5)
    assert alone.answer_nll == after.answer_nll
    assert not after.diverged


def test_learned_mode_requires_net(tiny):
    params, episodes = tiny
    with pytest.raises(ValueError):
        adapt_episode(params, None, episodes[0], TtaConfig(mode="layer-wise", k_steps=1), seed=0)


def test_sample_averaged_uses_table(tiny):
    params, episodes = tiny
    ep = episodes[4]
    n_blocks = 2 * params.cfg.n_layers
    rate = 2e-2
    ones = np.ones((2, n_blocks))
    sa = adapt_episode(
        params, None, ep, TtaConfig(mode="sample-averaged", eta=rate, k_steps=2), seed=9, avg_table=ones
    )
    fx = adapt_episode(params, None, ep, TtaConfig(mode="fixed", fixed_eta=rate, k_steps=2), seed=9)
    assert sa.answer_nll == fx.answer_nll

    with pytest.raises(ValueError):
        adapt_episode(params, None, ep, TtaConfig(mode="sample-averaged", k_steps=2), seed=9)
    with pytest.raises(ValueError):
        adapt_episode(
            params, None, ep, TtaConfig(mode="sample-averaged", k_steps=2), seed=9, avg_table=np.ones((3, n_blocks))
        )


def test_answer_grads_match_manual_replay(tiny):
    params, episodes = tiny
    ep = episodes[5]
    cfg = TtaConfig(mode="fixed", fixed_eta=1e-2, k_steps=1)
    trace = adapt_episode(params, None, ep, cfg, seed=13, want_answer_grads=True)
    assert trace.answer_grads is not None

    # replay: same derived seed, one identical step, then the answer backward
    mt = params.tensors()
    state = init_lora(params.cfg, rank=cfg.rank, alpha=cfg.alpha, sigma=cfg.init_sigma,
                      seed=episode_seed(13, ep.id), dtype=np.float64)
    gx = prompt_grad(mt, state, ep.prompt_tokens)
    state = scaled_step(state, gx, cfg.fixed_eta, np.ones(2 * params.cfg.n_layers))
    lt = state.tensors(requires_grad=True)
    loss = answer_nll(mt, lt, ep.prompt_tokens, ep.answer_tokens)
    loss.backward()
    manual = lt.grads()
    for (da, db), (ma, mb) in zip(trace.answer_grads.blocks, manual.blocks):
        np.testing.assert_array_equal(da, ma)
        np.testing.assert_array_equal(db, mb)


# -- step_scales ---------------------------------------------------------------------


def test_step_scales_layerwise_count_and_broadcast(tiny):
    params, _ = tiny
    n_blocks = 2 * params.cfg.n_layers
    h = np.zeros(2 * params.cfg.d_model)

    lw_cfg = TtaConfig(mode="layer-wise")
    lw = step_scales(_psi_for(params, zero=False), h, 2, 4, lw_cfg, n_blocks)
    assert lw.scales.shape == (n_blocks,)
    assert len(set(lw.scales.tolist())) > 1  # genuinely per-block

    sw_cfg = TtaConfig(mode="step-wise")
    sw = step_scales(_psi_for(params, out_dim=1, zero=False), h, 2, 4, sw_cfg, n_blocks)
    assert sw.scales.shape == (n_blocks,)
    assert np.all(sw.scales == sw.scales[0])  # one value replicated everywhere

    with pytest.raises(ValueError):
        step_scales(_psi_for(params), h, 1, 1, TtaConfig(mode="fixed"), n_blocks)
    with pytest.raises(ValueError):  # head width must match the mode
        step_scales(_psi_for(params, out_dim=1), h, 1, 1, lw_cfg, n_blocks)
    with pytest.raises(ValueError):
        step_scales(_psi_for(params), h, 1, 1, sw_cfg, n_blocks)


# -- average_scales ------------------------------------------------------------------


def _fake_trace(eid, scales_per_step, diverged=False):
    steps = [
        StepRecord(k=i + 1, scales=np.asarray(s, dtype=np.float64), raw=None,
                   h=np.zeros(2), grads=None, prompt_nll=1.0)
        for i, s in enumerate(scales_per_step)
    ]
    return TtaTrace(episode_id=eid, mode="layer-wise", k_steps=len(steps), k_max=5,
                    seed=0, steps=steps, answer_nll=1.0, diverged=diverged)


def test_average_scales_trivial_cases():
    one = _fake_trace("a", [[1.0, 2.0]])
    np.testing.assert_array_equal(average_scales([one]), [[1.0, 2.0]])

    t1 = _fake_trace("a", [[1.0, 1.0]])
    t3 = _fake_trace("b", [[3.0, 3.0]])
    np.testing.assert_array_equal(average_scales([t1, t3]), [[2.0, 2.0]])


def test_average_scales_matches_brute_force_mean(rng):
    k, blocks, n = 3, 4, 300
    tables = rng.uniform(0.1, 5.0, size=(n, k, blocks))
    traces = [_fake_trace(f"e{i}", tables[i]) for i in range(n)]
    got = average_scales(traces)

    # independent elementwise mean, accumulated with plain Python loops
    expect = np.zeros((k, blocks))
    for i in range(n):
        for a in range(k):
            for b in range(blocks):
                expect[a, b] += tables[i, a, b]
    expect /= n
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_average_scales_skips_diverged_and_validates():
    ok = _fake_trace("a", [[2.0, 4.0]])
    div = _fake_trace("b", [[100.0, 100.0]], diverged=True)
    np.testing.assert_array_equal(average_scales([ok, div]), [[2.0, 4.0]])

    with pytest.raises(ValueError):
        average_scales([])
    with pytest.raises(ValueError):
        average_scales([div])
    with pytest.raises(ValueError):
        average_scales([ok, _fake_trace("c", [[1.0, 1.0], [1.0, 1.0]])])


# -- diagnostics ---------------------------------------------------------------------


def test_cross_gradient_matches_manual_inner_product(tiny):
    params, episodes = tiny
    ep = episodes[6]
    state = init_lora(params.cfg, seed=41, dtype=np.float64)
    got = cross_gradient(params, state, ep)

    mt = params.tensors()
    gx = prompt_grad(mt, state, ep.prompt_tokens)
    lt = state.tensors(requires_grad=True)
    answer_nll(mt, lt, ep.prompt_tokens, ep.answer_tokens).backward()
    gy = lt.grads()
    manual = 0.0
    for (xa, xb), (ya, yb) in zip(gx.blocks, gy.blocks):
        manual += float(np.sum(xa * ya)) + float(np.sum(xb * yb))
    assert got == pytest.approx(manual, rel=1e-12)


def test_cross_gradient_on_self_is_squared_norm(tiny):
    params, episodes = tiny
    ep = episodes[6]
    state = init_lora(params.cfg, seed=42, dtype=np.float64)
    mt = params.tensors()
    gx = prompt_grad(mt, state, ep.prompt_tokens)
    self_ip = float(np.sum(gx.dot(gx)))
    assert self_ip == pytest.approx(gx.global_norm() ** 2, rel=1e-12)
    assert self_ip > 0.0


def test_taylor_residual_quadratic_slope(tiny):
    params, episodes = tiny
    ep = episodes[7]
    # a nonzero adapter state: at init the zero B factor makes the answer loss
    # locally linear along the update, leaving nothing but float noise to fit
    state = init_lora(params.cfg, seed=17, dtype=np.float64)
    rng = np.random.default_rng(117)
    for bl in state.blocks:
        bl.b = rng.standard_normal(bl.b.shape) * 0.05
    etas = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]
    residuals, slope = taylor_residual(params, state, ep, etas)
    assert all(r >= 0 for r in residuals)
    assert residuals[-1] < residuals[0]
    assert 1.7 <= slope <= 2.3

    with pytest.raises(ValueError):
        taylor_residual(params, state, ep, [1e-3, 1e-2])  # must decrease
    with pytest.raises(ValueError):
        taylor_residual(params, state, ep, [])


# -- trace files ---------------------------------------------------------------------


def test_trace_jsonl_round_trip(tiny, tmp_path):
    params, episodes = tiny
    cfg = TtaConfig(mode="fixed", k_steps=2)
    traces = [adapt_episode(params, None, ep, cfg, seed=21) for ep in episodes[:3]]
    path = tmp_path / "traces.jsonl"
    write_traces_jsonl(path, traces, config_hash="deadbeef0000")

    header, rows = read_traces_jsonl(path)
    assert header["config_hash"] == "deadbeef0000"
    assert len(rows) == 3
    for trace, row in zip(traces, rows):
        assert row["episode_id"] == trace.episode_id
        assert row["K"] == 2 and len(row["scales"]) == 2
        assert row["answer_nll"] == pytest.approx(trace.answer_nll)
        assert row["diverged"] is False
        assert row["prompt_nll"] == pytest.approx([s.prompt_nll for s in trace.steps])

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        read_traces_jsonl(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        TtaConfig(mode="other")
    with pytest.raises(ValueError):
        TtaConfig(k_steps=6, k_max=5)
    with pytest.raises(ValueError):
        TtaConfig(eta=0.0)
    cfg = TtaConfig(k_steps=5)
    assert cfg.with_steps(2).k_steps == 2
    assert cfg.with_steps(2).mode == cfg.mode
