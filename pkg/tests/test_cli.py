import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonylab.cli import main
from harmonylab.config import RunConfig, dumps_config, parse_config
from harmonylab.errors import ConfigError, CorruptCheckpoint, IncompatibleCheckpoint
from harmonylab.model import InteractionConfig, ModelConfig, init_params
from harmonylab.persist import Checkpoint, load_checkpoint, save_checkpoint
from harmonylab.rng import Rng
from harmonylab.synth import GenParams, load_dataset
from harmonylab.train import TrainState

MCFG = ModelConfig.from_gen(GenParams())
TINY = {
    "train": {"steps": 4, "batch": 2, "ckpt_interval": 2},
    "sampler": {"steps": 3},
    "experiment": {"n_train": 8, "clips_per_eval": 2},
}


def _state(seed=0):
    st_ = TrainState.fresh(init_params(MCFG, seed), seed)
    r = Rng(seed + 100)
    for k in st_.params:
        st_.m[k] = r.normal(st_.params[k].shape) if st_.params[k].size else st_.m[k]
        st_.v[k] = np.abs(r.normal(st_.params[k].shape))
    st_.step = 17
    st_.rng.normal(5)
    return st_


# ---- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    s = _state()
    ck = Checkpoint(s, MCFG, InteractionConfig(), {"seed": 3})
    raw1 = save_checkpoint(ck, tmp_path / "a.hrmy")
    back = load_checkpoint(tmp_path / "a.hrmy", expect=MCFG)
    for group in ("params", "m", "v"):
        a, b = getattr(s, group), getattr(back.state, group)
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert back.state.step == 17 and back.state.rng == s.rng
    assert back.model == MCFG and back.lineage == {"seed": 3}
    raw2 = save_checkpoint(back, tmp_path / "b.hrmy")
    assert raw1 == raw2


def test_truncated_checkpoint_is_corrupt(tmp_path):
    raw = save_checkpoint(Checkpoint(_state(), MCFG, InteractionConfig()), tmp_path / "a.hrmy")
    for cut in (len(raw) - 1, len(raw) // 2, 10):
        (tmp_path / "t.hrmy").write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "t.hrmy")


def test_flipped_byte_is_corrupt(tmp_path):
    raw = bytearray(save_checkpoint(Checkpoint(_state(), MCFG, InteractionConfig()), tmp_path / "a.hrmy"))
    raw[len(raw) // 2] ^= 0x01
    (tmp_path / "f.hrmy").write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "f.hrmy")


def test_version_mismatch_is_explicit(tmp_path):
    raw = bytearray(save_checkpoint(Checkpoint(_state(), MCFG, InteractionConfig()), tmp_path / "a.hrmy"))
    raw[4] = 9
    (tmp_path / "v.hrmy").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpoint, match="version"):
        load_checkpoint(tmp_path / "v.hrmy")


def test_different_T_a_names_the_tensor(tmp_path):
    save_checkpoint(Checkpoint(_state(), MCFG, InteractionConfig()), tmp_path / "a.hrmy")
    other = ModelConfig.from_gen(GenParams(T_a=12, T_c=48))
    with pytest.raises(IncompatibleCheckpoint, match="'audio'"):
        load_checkpoint(tmp_path / "a.hrmy", expect=other)
    with pytest.raises(IncompatibleCheckpoint, match="'a.null_ref'"):
        load_checkpoint(tmp_path / "a.hrmy", expect=replace(MCFG, T_r=4))
    with pytest.raises(IncompatibleCheckpoint, match="v.in.w"):
        load_checkpoint(tmp_path / "a.hrmy", expect=replace(MCFG, P_v=6))


def test_garbage_is_not_a_checkpoint(tmp_path):
    (tmp_path / "g").write_bytes(b"nope" * 10)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "g")


# ---- configs ------------------------------------------------------------------------


def test_config_defaults_materialize():
    cfg = parse_config("{}")
    assert cfg == RunConfig()
    d = json.loads(dumps_config(cfg))
    assert set(d) == {"gen_params", "model", "train", "sampler", "experiment"}
    assert d["train"]["lambda_v"] == 0.1 and d["train"]["lambda_a"] == 0.3 and d["train"]["shift"] == 5.0
    assert d["sampler"]["steps"] == 40 and d["sampler"]["s_v"] == 3.0 and d["sampler"]["s_a"] == 2.0


@pytest.mark.parametrize(
    "doc",
    [
        {"extra": {}},
        {"train": {"lrr": 1}},
        {"train": {"interaction": {"mode": "gldi", "radius": 2}}},
        {"train": {"steps": 1.5}},
        {"train": {"shift": 0.5}},
        {"sampler": {"guidance": "loud"}},
        {"model": {"T_a": 12}},
        {"gen_params": {"T_c": 50}},
        {"experiment": {"seeds": []}},
        {"model": {"eps_skip": 1}},
    ],
)
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


@settings(max_examples=50, deadline=None)
@given(
    lr=st.one_of(st.integers(1, 5), st.floats(1e-5, 1.0)),
    steps=st.integers(0, 5000),
    s_v=st.floats(0, 10),
    seeds=st.lists(st.integers(0, 99), min_size=1, max_size=4),
    mode=st.sampled_from(["gldi", "global_xattn", "none"]),
)
def test_config_canonicalization_idempotent(lr, steps, s_v, seeds, mode):
    doc = {
        "train": {"lr": lr, "steps": steps, "interaction": {"mode": mode}},
        "sampler": {"s_v": s_v},
        "experiment": {"seeds": seeds},
    }
    once = parse_config(doc)
    text = dumps_config(once)
    assert parse_config(text) == once
    assert dumps_config(parse_config(text)) == text


# ---- main -----------------------------------------------------------------------------


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    return p


def test_unknown_subcommand_and_flag_exit_2(tmp_path, capsys):
    assert main(["fly"]) == 2
    assert main(["train", "--out", str(tmp_path / "x"), "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"train": {"lrr": 1}}')
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r")]) == 2


def test_train_writes_checkpoints_and_metrics(tmp_path, cfg_path):
    out = tmp_path / "run1"
    assert main(["train", "--config", str(cfg_path), "--variant", "cts", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("ckpt_*.hrmy")) == ["ckpt_000000.hrmy", "ckpt_000002.hrmy", "ckpt_000004.hrmy"]
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert [r[0] for r in rows[1:]] == ["0", "2", "4"]
    ck = load_checkpoint(out / "final.hrmy", expect=parse_config(TINY).mcfg)
    assert ck.state.step == 4 and ck.lineage["variant"] == "cts"
    assert parse_config((out / "config.json").read_text()) == parse_config(TINY)


def test_deterministic_log_is_byte_identical(tmp_path, cfg_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out), "--deterministic-log"]) == 0
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "final.hrmy").read_bytes() == (outs[1] / "final.hrmy").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**TINY, "train": {**TINY["train"], "lr": 1e300}}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == 3


def test_sample_unit_sync_matches_unguided(tmp_path, cfg_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run)]) == 0
    ck = str(run / "final.hrmy")
    base = ["sample", "--config", str(cfg_path), "--checkpoint", ck, "--seed", "5"]
    assert main(base + ["--guidance", "sync", "--sv", "1", "--sa", "1", "--out", str(tmp_path / "s1")]) == 0
    assert main(base + ["--guidance", "none", "--out", str(tmp_path / "s2")]) == 0
    assert main(base + ["--guidance", "sync", "--out", str(tmp_path / "s3")]) == 0
    a, b, c = ((tmp_path / d / "samples.bin").read_bytes() for d in ("s1", "s2", "s3"))
    assert a == b and a != c
    side = json.loads((tmp_path / "s1" / "samples.json").read_text())
    assert side["seed"] == 5 and side["sampler"]["guidance"] == "sync" and len(side["checkpoint_id"]) == 8
    clips, _, _ = load_dataset(tmp_path / "s1" / "samples.bin")
    assert len(clips) == 2


def test_datagen_and_inspect(tmp_path, cfg_path, capsys):
    assert main(["datagen", "--config", str(cfg_path), "--data-seed", "4", "--out", str(tmp_path / "d")]) == 0
    clips, _, header = load_dataset(tmp_path / "d" / "train.bin")
    assert len(clips) == 8 and header["extra"]["seed"] == 4
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "d" / "eval.bin")]) == 0
    assert "oracle" in json.loads(capsys.readouterr().out)


def test_inspect_corrupt_checkpoint_exit_2(tmp_path):
    (tmp_path / "x.hrmy").write_bytes(b"HRMY" + b"\0" * 20)
    assert main(["inspect", str(tmp_path / "x.hrmy")]) == 2
