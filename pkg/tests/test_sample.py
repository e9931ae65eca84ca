import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonylab.errors import NumericalError
from harmonylab.latent import CondSet
from harmonylab.model import InteractionConfig, ModelConfig, init_params
from harmonylab.rng import Rng
from harmonylab.sample import (
    NullAnchors,
    SamplerConfig,
    eps_to_velocity,
    generate,
    generate_driven,
    make_null_anchors,
    model_denoiser,
    standard_cfg,
    sync_cfg_audio,
    sync_cfg_video,
    time_grid,
)
from harmonylab.synth import GenParams, make_dataset, recover_track
from harmonylab.train import interp_noise

GP = GenParams()
MCFG = ModelConfig.from_gen(GP)
SHAPES = ((GP.T_v, GP.P_v), (GP.T_a, GP.P_a))
arrays = st.integers(0, 2**32).map(lambda s: Rng(s).normal((3, 5)))


@settings(max_examples=50, deadline=None)
@given(a=arrays, b=arrays)
def test_scale_one_and_zero_reductions(a, b):
    assert np.array_equal(standard_cfg(a, b, 1.0), b)
    assert np.array_equal(standard_cfg(a, b, 0.0), a)
    assert np.array_equal(sync_cfg_video(b, a, 1.0), b)
    assert np.array_equal(sync_cfg_audio(b, a, 1.0), b)


def test_standard_cfg_linearity():
    c = Rng(1).normal((4,))
    np.testing.assert_allclose(standard_cfg(np.zeros(4), c, 2.0), 2 * c, rtol=0, atol=0)
    u = Rng(2).normal((4,))
    np.testing.assert_allclose(standard_cfg(u, c, 3.0), u + 3.0 * (c - u), atol=1e-14)


def test_velocity_conversion():
    r = Rng(3)
    z0, eps = r.normal((2, 5)), r.normal((2, 5))
    np.testing.assert_array_equal(eps_to_velocity(z0, eps, 0.0), eps - z0)
    assert not np.any(eps_to_velocity(eps, eps, 0.7))
    for t in (0.0, 0.3, 0.9, 1 - 1e-3):
        zt = interp_noise(z0, eps, t)
        np.testing.assert_allclose(eps_to_velocity(zt, eps, t), eps - z0, atol=1e-10)
    assert np.isfinite(eps_to_velocity(z0, eps, 1.0)).all()


def test_time_grid():
    g = time_grid(40, 5.0)
    assert g[0] == 0.0 and g[-1] == 1.0
    assert np.all(np.diff(g) > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(s_v=-1)
    with pytest.raises(ValueError):
        SamplerConfig(guidance="fancy")


def _oracle(z0v, z0a):
    def fn(zv, za, conds, tv, ta):
        tv, ta = tv[:, None, None], ta[:, None, None]
        ev = np.where(tv > 0, (zv - (1 - tv) * z0v) / np.maximum(tv, 1e-300), zv)
        ea = np.where(ta > 0, (za - (1 - ta) * z0a) / np.maximum(ta, 1e-300), za)
        return ev, ea

    return fn


def test_oracle_denoiser_recovers_data():
    clips = make_dataset(GP, 2, 4)
    z0v = np.stack([c.video.frames for c in clips])
    z0a = np.stack([c.audio.frames for c in clips])
    conds = CondSet.stack([c.conds for c in clips])
    v, a = generate(_oracle(z0v, z0a), conds, SamplerConfig(steps=40), SHAPES, Rng(5))
    assert np.abs(v - z0v).max() <= 1e-3 and np.abs(a - z0a).max() <= 1e-3


def test_single_step_is_finite():
    clips = make_dataset(GP, 1, 4)
    z0v, z0a = clips[0].video.frames[None], clips[0].audio.frames[None]
    v, a = generate(_oracle(z0v, z0a), clips[0].conds, SamplerConfig(steps=1), SHAPES, Rng(6))
    assert np.isfinite(v).all() and np.isfinite(a).all()


def _model(seed=0):
    r = Rng(seed)
    p = {k: (v if np.any(v) else 0.1 * r.normal(v.shape)) for k, v in init_params(MCFG, seed).items()}
    return model_denoiser(p, InteractionConfig(), MCFG)


def _conds(n=2):
    clips = make_dataset(GP, n, 7)
    return CondSet.stack([c.conds for c in clips]), NullAnchors.stack([make_null_anchors(GP, c.class_id) for c in clips])


def test_sync_at_unit_scales_equals_unguided():
    den = _model()
    conds, anchors = _conds()
    cfg = SamplerConfig(steps=6)
    plain = generate(den, conds, cfg, SHAPES, Rng(8))
    sync = generate(den, conds, SamplerConfig(steps=6, guidance="sync", s_v=1.0, s_a=1.0), SHAPES, Rng(8), anchors)
    assert np.array_equal(plain[0], sync[0]) and np.array_equal(plain[1], sync[1])
    std = generate(den, conds, SamplerConfig(steps=6, guidance="standard", s=1.0), SHAPES, Rng(8))
    # the unconditional half shares a batch with the conditional half, so equality is numerical only
    np.testing.assert_allclose(std[0], plain[0], atol=1e-10)


def test_sync_guidance_changes_output_and_needs_anchors():
    den = _model()
    conds, anchors = _conds()
    plain = generate(den, conds, SamplerConfig(steps=4), SHAPES, Rng(9))
    sync = generate(den, conds, SamplerConfig(steps=4, guidance="sync"), SHAPES, Rng(9), anchors)
    assert not np.array_equal(plain[0], sync[0])
    with pytest.raises(ValueError):
        generate(den, conds, SamplerConfig(steps=4, guidance="sync"), SHAPES, Rng(9))


def test_driven_forwards_see_clean_anchors():
    calls = []
    inner = _model()

    def spy(zv, za, conds, tv, ta):
        calls.append((zv.copy(), za.copy(), tv.copy(), ta.copy()))
        return inner(zv, za, conds, tv, ta)

    conds, anchors = _conds()
    generate(spy, conds, SamplerConfig(steps=3, guidance="sync"), SHAPES, Rng(10), anchors)
    driven = calls[1::2]
    assert len(driven) == 3
    for zv, za, tv, ta in driven:
        assert np.array_equal(za[:2], anchors.audio_null) and not np.any(ta[:2])
        assert np.array_equal(zv[2:], anchors.video_null) and not np.any(tv[2:])


def test_anchors_are_null_signals():
    an = make_null_anchors(GP, 1)
    assert recover_track(an.audio_null, GP, "audio").std() < 1e-12
    assert recover_track(an.video_null, GP, "video").std() < 1e-12


def test_generate_is_deterministic():
    den = _model()
    conds, anchors = _conds()
    cfg = SamplerConfig(steps=3, guidance="sync")
    a = generate(den, conds, cfg, SHAPES, Rng(11), anchors)
    b = generate(den, conds, cfg, SHAPES, Rng(11), anchors)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_driven_generation_keeps_audio():
    calls = []
    inner = _model()

    def spy(zv, za, conds, tv, ta):
        calls.append((za.copy(), ta.copy()))
        return inner(zv, za, conds, tv, ta)

    clips = make_dataset(GP, 2, 1)
    audio = np.stack([c.audio.frames for c in clips])
    conds = CondSet.stack([c.conds for c in clips])
    v = generate_driven(spy, audio, conds, SamplerConfig(steps=3), SHAPES[0], Rng(12))
    assert v.shape == (2, *SHAPES[0])
    assert all(np.array_equal(za, audio) and not np.any(ta) for za, ta in calls)


def test_divergence_is_reported():
    def bad(zv, za, conds, tv, ta):
        return zv * np.inf, za

    conds, _ = _conds(1)
    with pytest.raises(NumericalError) as ei:
        generate(bad, conds, SamplerConfig(steps=2), SHAPES, Rng(13))
    assert ei.value.step == 0
