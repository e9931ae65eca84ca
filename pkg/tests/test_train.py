import csv
import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonylab import tensor as tn
from harmonylab.errors import NumericalError
from harmonylab.model import ForwardOut, ModelConfig, forward_joint, init_params
from harmonylab.rng import Rng
from harmonylab.synth import GenParams, make_dataset
from harmonylab.train import (
    METRICS_HEADER,
    TrainConfig,
    TrainState,
    interp_noise,
    loss_components,
    sample_time,
    stack_clips,
    train_run,
    train_step,
)

GP = GenParams()
MCFG = ModelConfig.from_gen(GP)
DATA = make_dataset(GP, 16, 0)


def test_interp_endpoints():
    r = Rng(1)
    z0, eps = r.normal((3, 4)), r.normal((3, 4))
    assert np.array_equal(interp_noise(z0, eps, 0.0), z0)
    assert np.array_equal(interp_noise(z0, eps, 1.0), eps)
    np.testing.assert_allclose(interp_noise(z0, eps, 0.5), (z0 + eps) / 2, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        interp_noise(z0, eps, 1.5)


def test_sample_time_cases():
    assert sample_time(0.0, 5) == 0.0 and sample_time(1.0, 5) == 1.0
    assert sample_time(0.5, 5) == pytest.approx(2.5 / 3, abs=1e-15)
    u = Rng(2).uniform(50)
    assert np.array_equal(sample_time(u, 1), u)


@settings(max_examples=100, deadline=None)
@given(u1=st.floats(0, 1), u2=st.floats(0, 1), shift=st.floats(1, 20))
def test_sample_time_monotone(u1, u2, shift):
    if u1 < u2:
        assert sample_time(u1, shift) <= sample_time(u2, shift)


def test_shift_pushes_mass_to_high_noise():
    t = sample_time(Rng(3).uniform(10_000), 5.0)
    assert np.median(t) > 0.8


def _oracle_forward(clips):
    b = stack_clips(clips)

    def fwd(p, zv, za, conds, tv, ta):
        n = zv.shape[0] // b.z_v0.shape[0]
        z0v, z0a = np.tile(b.z_v0, (n, 1, 1)), np.tile(b.z_a0, (n, 1, 1))
        tv_, ta_ = np.maximum(tv, 1e-12)[:, None, None], np.maximum(ta, 1e-12)[:, None, None]
        ev = (zv - (1 - tv[:, None, None]) * z0v) / tv_
        ea = (za - (1 - ta[:, None, None]) * z0a) / ta_
        return ForwardOut(tn.Tensor(ev), tn.Tensor(ea), None)

    return fwd


def test_oracle_predictor_has_zero_loss():
    clips = DATA[:4]
    _, bd = loss_components({}, clips, Rng(4), TrainConfig(cond_drop=0.0), MCFG, forward=_oracle_forward(clips))
    for v in (bd.L_joint, bd.L_a_driven, bd.L_v_driven, bd.total):
        assert v < 1e-20


def test_total_is_weighted_sum():
    p = init_params(MCFG, 0)
    for lv, la in ((0.1, 0.3), (0.0, 0.0), (2.0, 0.5)):
        cfg = TrainConfig(lambda_v=lv, lambda_a=la)
        _, bd = loss_components(p, DATA[:4], Rng(5), cfg, MCFG)
        assert bd.total == pytest.approx(bd.L_joint + lv * bd.L_a_driven + la * bd.L_v_driven, abs=1e-9)
        assert min(bd.L_joint, bd.L_a_driven, bd.L_v_driven) >= 0


def test_components_nonnegative_over_draws():
    p = init_params(MCFG, 1)
    rng = Rng(6)
    for _ in range(100):
        _, bd = loss_components(p, DATA[:2], rng, TrainConfig(), MCFG)
        assert min(bd.L_joint, bd.L_a_driven, bd.L_v_driven) >= 0


def test_clean_conditioning_is_fed():
    seen = []

    def spy(p, zv, za, conds, tv, ta):
        out = forward_joint(p, zv, za, conds, tv, ta, TrainConfig().interaction, MCFG)
        seen.append((zv.copy(), za.copy(), tv.copy(), ta.copy()))
        return out

    clips = DATA[:3]
    loss_components(init_params(MCFG, 0), clips, Rng(7), TrainConfig(), MCFG, forward=spy)
    zv, za, tv, ta = seen[0]
    b = stack_clips(clips)
    B = 3
    assert np.array_equal(za[B : 2 * B], b.z_a0) and not np.any(ta[B : 2 * B])
    assert np.array_equal(zv[2 * B :], b.z_v0) and not np.any(tv[2 * B :])
    # paired noise: the joint and driven rows share the noisy modality and its timestep
    assert np.array_equal(zv[:B], zv[B : 2 * B]) and np.array_equal(za[:B], za[2 * B :])
    assert np.array_equal(tv[:B], tv[B : 2 * B]) and np.array_equal(ta[:B], ta[2 * B :])


def test_driven_terms_do_not_touch_the_other_head():
    p = init_params(MCFG, 0)
    leaves = {k: tn.Tensor(v, requires_grad=True) for k, v in p.items()}
    names = ["a.out.w", "a.final.w", "v.out.w"]
    for w, dead, live in (((0.0, 1.0, 0.0), ["a.out.w", "a.final.w"], "v.out.w"), ((0.0, 0.0, 1.0), ["v.out.w"], "a.out.w")):
        total, _ = loss_components(leaves, DATA[:2], Rng(8), TrainConfig(), MCFG, weights=w)
        grads = dict(zip(names, tn.backward(total, [leaves[n] for n in names])))
        for n in dead:
            assert not np.any(grads[n]), n
        assert np.any(grads[live])


def test_nan_loss_raises():
    p = init_params(MCFG, 0)
    p["v.out.b"] = np.full_like(p["v.out.b"], np.inf)
    with pytest.raises(NumericalError):
        loss_components(p, DATA[:2], Rng(9), TrainConfig(), MCFG)


def test_sampled_mode_evaluates_one_task():
    p = init_params(MCFG, 0)
    _, bd = loss_components(p, DATA[:2], Rng(10), TrainConfig(task_mix="sampled"), MCFG)
    vals = [bd.L_joint, bd.L_a_driven, bd.L_v_driven]
    assert sum(not math.isnan(v) for v in vals) == 1


def test_joint_only_equals_cts_with_zero_lambdas():
    a = train_run(TrainConfig(steps=1, batch=2, ckpt_interval=1), DATA, "joint_only", MCFG)
    b = train_run(TrainConfig(steps=1, batch=2, ckpt_interval=1, lambda_v=0.0, lambda_a=0.0), DATA, "cts", MCFG)
    assert a.rows[1]["total"] == b.rows[1]["total"]


def test_training_is_deterministic():
    def run():
        state = TrainState.fresh(init_params(MCFG, 0), 3)
        out = []
        for i in range(10):
            state, bd = train_step(state, DATA[i : i + 2], TrainConfig(batch=2), MCFG)
            out.append(bd)
        return out, state.params

    a, pa = run()
    b, pb = run()
    assert a == b
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_train_step_rejects_empty_batch():
    with pytest.raises(ValueError):
        train_step(TrainState.fresh(init_params(MCFG, 0), 0), [], TrainConfig(), MCFG)


@lru_cache(maxsize=None)
def _overfit(mcfg, steps=500):
    cfg = TrainConfig(batch=1, steps=steps, cond_drop=0.0)
    state = TrainState.fresh(init_params(mcfg, 0), 0)
    clip = [DATA[0]]

    def probe(params):
        # the same 64 (noise, t) draws before and after, so only the weights differ
        rng = Rng(99)
        return np.mean([loss_components(params, clip, rng, cfg, mcfg)[1].total for _ in range(64)])

    before = probe(state.params)
    for _ in range(cfg.steps):
        state, _ = train_step(state, clip, cfg, mcfg)
    return before, probe(state.params)


def test_overfit_single_clip():
    # plain noise heads start from a large loss and must shed 90% of it
    before, after = _overfit(replace(MCFG, eps_skip=False))
    assert after < 0.1 * before


def test_skip_heads_overfit_lower_in_absolute_terms():
    # the skip form starts near the data (eps = z_t), so compare end points instead of ratios
    plain = _overfit(replace(MCFG, eps_skip=False))[1]
    before, after = _overfit(MCFG)
    assert after < plain and after < 0.2 * before


def test_micro_model_total_loss_gradcheck():
    gp = GenParams(T_v=2, T_a=2, T_c=2, P_v=4, P_a=4, K=1, smooth_w=0, T_r=2, d_c=4)
    mcfg = ModelConfig.from_gen(gp, d_model=8, heads=2, layers=1, mlp_hidden=8, t_freq=4)
    clips = make_dataset(gp, 2, 0)
    r = Rng(11)
    params = {k: v + 0.2 * r.normal(v.shape) for k, v in init_params(mcfg, 0).items()}

    def f(**leaves):
        total, _ = loss_components(leaves, clips, Rng(12), TrainConfig(), mcfg)
        return total

    rep = tn.finite_diff_check(lambda d: f(**d), params, h=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_run_logs_and_checkpoints(tmp_path):
    cfg = TrainConfig(steps=6, batch=2, ckpt_interval=2)
    log = tmp_path / "m.csv"
    hook_calls = []
    res = train_run(cfg, DATA, "cts", MCFG, eval_hook=lambda p, s: hook_calls.append(s) or (0.5, 0.25), log_path=log)
    assert [s for s, _ in res.checkpoints] == [0, 2, 4, 6] == hook_calls
    rows = list(csv.reader(open(log)))
    assert rows[0] == METRICS_HEADER and len(rows) == 5
    assert rows[2][6:8] == ["0.5", "0.25"]


def test_run_rejects_unknown_variant():
    with pytest.raises(ValueError):
        train_run(TrainConfig(steps=1), DATA, "both", MCFG)
    with pytest.raises(ValueError):
        train_run(TrainConfig(steps=1), [], "cts", MCFG)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_v=-1)
    with pytest.raises(ValueError):
        TrainConfig(shift=0.5)
    assert replace(TrainConfig(), batch=3).batch == 3
