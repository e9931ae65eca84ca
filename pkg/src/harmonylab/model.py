"""Dual-branch diffusion transformer with per-layer video/audio interaction.

Each layer runs, in order:

1. global style alignment: reference rows of the audio stream attend to the
   whole video stream (query = reference), residual add;
2. intra-modal self-attention in each branch (RoPE on frame indices), and
   in parallel the bidirectional frame-wise cross-attention (A2V, V2A) read
   from the same layer-input states; all deltas are summed into the residual;
3. a per-branch MLP.

Self-attention and MLP inputs are layer-normed and modulated by the branch's
timestep (plus prompt, for video) conditioning vector.

The audio stream is ``[reference (T_r) | speech | prompt | audio (T_a)]``;
conditioning rows sit at RoPE positions ``-(T_r+2) .. -1``.

Parameters are a flat ``dict[str, np.ndarray]`` in a fixed insertion order;
forward passes accept either arrays or :class:`~harmonylab.tensor.Tensor`
leaves, so the same code serves inference and training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from math import ceil, floor, sqrt
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import MissingReference, NumericalError, ShapeError
from .latent import CondSet
from .rng import Rng, derive_seed
from .tensor import Tensor

ModelParams = dict  # name -> np.ndarray, fixed order


@dataclass(frozen=True)
class InteractionConfig:
    mode: str = "gldi"  # gldi | global_xattn | none
    rope_align: bool = True
    window_radius: int = 1

    def __post_init__(self):
        if self.mode not in ("gldi", "global_xattn", "none"):
            raise ValueError(f"unknown interaction mode {self.mode!r}")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    T_v: int = 16
    T_a: int = 24
    T_r: int = 6
    P_v: int = 12
    P_a: int = 8
    d_c: int = 16
    d_model: int = 48
    heads: int = 4
    layers: int = 2
    mlp_hidden: int = 96
    rope_base: float = 100.0
    t_freq: int = 32
    # heads emit eps = z_t + (1 - t) * out, i.e. a velocity network in noise units
    eps_skip: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 2:
            raise ShapeError("head dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_gen(cls, gp, **kw) -> "ModelConfig":
        return cls(T_v=gp.T_v, T_a=gp.T_a, T_r=gp.T_r, P_v=gp.P_v, P_a=gp.P_a, d_c=gp.d_c, **kw)


# ---- positions and windows --------------------------------------------------


def rescale_position(j: int, T_src: int, T_dst: int) -> float:
    """Index ``j`` of a ``T_src``-frame sequence expressed on a ``T_dst``-frame timeline."""
    if not 0 <= j < T_src or T_src < 1 or T_dst < 1:
        raise ValueError(f"bad position j={j} for T_src={T_src}, T_dst={T_dst}")
    return (j * T_dst) / T_src


def context_window(i: int, T_tgt: int, T_src: int, r: int) -> list[int]:
    """Source indices ``floor(c)-r .. ceil(c)+r`` around ``c = i*T_src/T_tgt``, clamped."""
    if not 0 <= i < T_tgt:
        raise ValueError(f"target index {i} outside [0, {T_tgt})")
    num = i * T_src
    lo = num // T_tgt - r
    hi = -(-num // T_tgt) + r
    return list(range(max(lo, 0), min(hi, T_src - 1) + 1))


@lru_cache(maxsize=64)
def window_mask(T_tgt: int, T_src: int, r: int) -> np.ndarray:
    m = np.zeros((T_tgt, T_src), dtype=bool)
    for i in range(T_tgt):
        m[i, context_window(i, T_tgt, T_src, r)] = True
    m.flags.writeable = False
    return m


def source_positions(T_src: int, T_tgt: int, rope_align: bool) -> np.ndarray:
    if rope_align:
        return np.array([rescale_position(j, T_src, T_tgt) for j in range(T_src)])
    return np.arange(T_src, dtype=np.float64)


# ---- parameters -----------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh weights; each tensor gets its own derived stream so shapes can change independently."""
    d, h, f = cfg.d_model, cfg.mlp_hidden, cfg.t_freq
    specs: list[tuple[str, tuple[int, ...], float]] = []

    def lin(name, fan_in, fan_out, gain=1.0, bias=False):
        specs.append((name + ".w", (fan_in, fan_out), gain / sqrt(fan_in)))
        if bias:
            specs.append((name + ".b", (fan_out,), 0.0))

    lin("temb.1", f, d, bias=True)
    lin("temb.2", d, d, bias=True)
    lin("v.in", cfg.P_v, d, bias=True)
    lin("v.prompt", cfg.d_c, d)
    lin("a.in", cfg.P_a, d, bias=True)
    lin("a.ref", cfg.P_a, d, bias=True)
    specs.append(("a.null_ref", (cfg.T_r, d), 1.0))
    lin("a.speech", cfg.d_c, d, bias=True)
    lin("a.prompt", cfg.d_c, d, bias=True)
    for l in range(cfg.layers):
        for m in ("v", "a"):
            p = f"{m}{l}"
            lin(p + ".mod", d, 4 * d, gain=0.0, bias=True)
            lin(p + ".qkv", d, 3 * d)
            lin(p + ".o", d, d, gain=0.5)
            lin(p + ".mlp1", d, h, bias=True)
            lin(p + ".mlp2", h, d, gain=0.5, bias=True)
        for blk in ("a2v", "v2a", "style"):
            for w in ("q", "k", "v"):
                lin(f"x{l}.{blk}.{w}", d, d)
            lin(f"x{l}.{blk}.o", d, d, gain=0.5)
    for m, P in (("v", cfg.P_v), ("a", cfg.P_a)):
        lin(m + ".final", d, 2 * d, gain=0.0, bias=True)
        lin(m + ".out", d, P, gain=0.5, bias=True)

    params: ModelParams = {}
    for name, shape, std in specs:
        if std == 0.0:
            params[name] = np.zeros(shape)
        else:
            params[name] = std * Rng(derive_seed(seed, name)).normal(shape)
    return params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


# ---- building blocks ----------------------------------------------------------


def _heads(x: Tensor, H: int) -> Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return tn.layer_norm(x) * (scale + 1.0) + shift


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def framewise_cross_attention(
    z_tgt,
    z_src,
    weights: Mapping[str, object],
    cfg: InteractionConfig,
    heads: int,
    rope_base: float = 100.0,
    direction: str = "a2v",
    return_weights: bool = False,
):
    """Target frames attend to source frames; returns the residual delta for ``z_tgt``.

    Inputs are ``[T, d]`` or ``[B, T, d]``.  ``weights`` holds ``q, k, v, o``.
    In ``gldi`` mode target frame ``i`` only sees ``context_window(i, ...)``;
    ``global_xattn`` sees every source frame.  Queries sit at RoPE position
    ``i``; keys at the source index rescaled onto the target timeline when
    ``cfg.rope_align`` is set, otherwise at the raw source index.
    ``direction`` is informational ("a2v" or "v2a").
    """
    if cfg.mode == "none":
        raise ValueError("frame-wise attention requested with interaction mode 'none'")
    z_tgt, z_src = tn.as_tensor(z_tgt), tn.as_tensor(z_src)
    squeeze = z_tgt.ndim == 2
    if squeeze:
        z_tgt, z_src = z_tgt.reshape(1, *z_tgt.shape), z_src.reshape(1, *z_src.shape)
    W = {k: tn.as_tensor(weights[k]) for k in ("q", "k", "v", "o")}
    if any(w.data.size == 0 for w in W.values()):
        raise ShapeError("empty projection weights")
    if z_tgt.shape[-1] != W["q"].shape[0] or z_src.shape[-1] != W["k"].shape[0]:
        raise ShapeError(f"{direction}: hidden dims {z_tgt.shape[-1]}/{z_src.shape[-1]} do not match projections")
    T_tgt, T_src = z_tgt.shape[1], z_src.shape[1]
    q = _heads(z_tgt @ W["q"], heads)
    k = _heads(z_src @ W["k"], heads)
    v = _heads(z_src @ W["v"], heads)
    q = tn.rope_apply(q, np.arange(T_tgt, dtype=np.float64), rope_base)
    k = tn.rope_apply(k, source_positions(T_src, T_tgt, cfg.rope_align), rope_base)
    mask = window_mask(T_tgt, T_src, cfg.window_radius) if cfg.mode == "gldi" else None
    out, attn = tn.sdpa(q, k, v, 1.0 / sqrt(q.shape[-1]), mask=mask, return_weights=True)
    delta = _merge(out) @ W["o"]
    if squeeze:
        delta = delta.reshape(T_tgt, delta.shape[-1])
    return (delta, attn) if return_weights else delta


def _style_delta(q_in: Tensor, kv_in: Tensor, W: Mapping[str, object], heads: int, ref_present=None) -> Tensor:
    W = {k: tn.as_tensor(W[k]) for k in ("q", "k", "v", "o")}
    q = _heads(q_in @ W["q"], heads)
    k = _heads(kv_in @ W["k"], heads)
    v = _heads(kv_in @ W["v"], heads)
    upd = _merge(tn.sdpa(q, k, v, 1.0 / sqrt(q.shape[-1]))) @ W["o"]
    if ref_present is not None:
        upd = upd * np.asarray(ref_present, dtype=np.float64)[:, None, None]
    return upd


def global_style_align(z_r, z_v, weights: Mapping[str, object], heads: int, ref_present=None):
    """``z_r + o(sdpa(z_r Wq, z_v Wk, z_v Wv))``; skipped (identity) where there is no reference.

    Returns ``(z_r_updated, applied)``; ``applied`` is False for a null reference.
    """
    if z_r is None:
        return None, False
    z_r, z_v = tn.as_tensor(z_r), tn.as_tensor(z_v)
    squeeze = z_r.ndim == 2
    if squeeze:
        z_r, z_v = z_r.reshape(1, *z_r.shape), z_v.reshape(1, *z_v.shape)
    out = z_r + _style_delta(z_r, z_v, weights, heads, ref_present)
    if squeeze:
        out = out.reshape(out.shape[1], out.shape[2])
    applied = ref_present is None or bool(np.any(np.asarray(ref_present) > 0))
    return out, applied


def _cond_tokens(P, conds: CondSet, cfg: ModelConfig):
    """Reference rows and the speech / prompt tokens, each ``[B, n, d]``."""
    B = conds.prompt_emb.shape[0]
    if conds.reference is None:
        ref = tn.as_tensor(np.zeros((B, 1, 1))) + P["a.null_ref"]
        present = np.zeros(B)
    else:
        if conds.reference.shape[1:] != (cfg.T_r, cfg.P_a):
            raise ShapeError(f"reference shape {conds.reference.shape[1:]} != {(cfg.T_r, cfg.P_a)}")
        present = np.ones(B) if conds.ref_present is None else np.asarray(conds.ref_present, dtype=np.float64)
        ref = conds.reference @ P["a.ref.w"] + P["a.ref.b"]
        if not present.all():
            m = present[:, None, None]
            ref = ref * m + P["a.null_ref"] * (1.0 - m)
    speech = (conds.speech_emb @ P["a.speech.w"] + P["a.speech.b"]).reshape(B, 1, cfg.d_model)
    prompt = (conds.prompt_emb @ P["a.prompt.w"] + P["a.prompt.b"]).reshape(B, 1, cfg.d_model)
    return ref, speech, prompt, present


def assemble_audio_stream(ref_tokens, audio_tokens, speech_token, prompt_token, T_r: int | None = None):
    """``[ref | speech | prompt | audio]`` plus RoPE positions and the audio slice.

    ``ref_tokens=None`` is an error; callers substitute learned null tokens
    for the unconditional mode before assembling.
    """
    if ref_tokens is None:
        raise MissingReference("reference tokens are required; pass null tokens for unconditional mode")
    ref_tokens = tn.as_tensor(ref_tokens)
    T_r = ref_tokens.shape[-2] if T_r is None else T_r
    T_a = tn.as_tensor(audio_tokens).shape[-2]
    seq = tn.concat([ref_tokens, speech_token, prompt_token, audio_tokens], axis=-2)
    positions = np.concatenate([np.arange(-(T_r + 2), 0), np.arange(T_a)]).astype(np.float64)
    audio_slice = slice(T_r + 2, T_r + 2 + T_a)
    return seq, positions, audio_slice


def _self_attention(P, prefix: str, x: Tensor, positions: np.ndarray, cfg: ModelConfig) -> Tensor:
    B, T, d = x.shape
    H, dh = cfg.heads, cfg.head_dim
    qkv = (x @ P[prefix + ".qkv.w"]).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q = tn.rope_apply(qkv[0], positions, cfg.rope_base)
    k = tn.rope_apply(qkv[1], positions, cfg.rope_base)
    out = tn.sdpa(q, k, qkv[2], 1.0 / sqrt(dh))
    return _merge(out) @ P[prefix + ".o.w"]


def _mlp(P, prefix: str, x: Tensor) -> Tensor:
    hid = tn.silu(x @ P[prefix + ".mlp1.w"] + P[prefix + ".mlp1.b"])
    return hid @ P[prefix + ".mlp2.w"] + P[prefix + ".mlp2.b"]


def _chunks(mod: Tensor, n: int, d: int) -> list[Tensor]:
    B = mod.shape[0]
    return [mod[:, k * d : (k + 1) * d].reshape(B, 1, d) for k in range(n)]


def _xweights(P, l: int, blk: str) -> dict:
    return {w: P[f"x{l}.{blk}.{w}.w"] for w in ("q", "k", "v", "o")}


@dataclass
class ForwardOut:
    eps_v: Tensor
    eps_a: Tensor
    attn_trace: list[np.ndarray] | None = None
    style_applied: bool = False
    inputs: dict = field(default_factory=dict)


def forward_joint(
    params: Mapping[str, object],
    z_v_t,
    z_a_t,
    conds: CondSet,
    t_v,
    t_a,
    icfg: InteractionConfig,
    cfg: ModelConfig,
    trace: bool = False,
) -> ForwardOut:
    """Predict the noise of both modalities.

    ``z_v_t`` is ``[B, T_v, P_v]`` and ``z_a_t`` is ``[B, T_a, P_a]`` (a
    missing batch axis is added); ``t_v`` / ``t_a`` are scalars or ``[B]``.
    With ``trace=True`` the A2V attention weights of each layer are returned.
    """
    P = {k: tn.as_tensor(v) for k, v in params.items()}
    z_v_t, z_a_t = tn.as_tensor(z_v_t), tn.as_tensor(z_a_t)
    if z_v_t.ndim == 2:
        z_v_t, z_a_t = z_v_t.reshape(1, *z_v_t.shape), z_a_t.reshape(1, *z_a_t.shape)
    conds = conds.as_batch()
    B = z_v_t.shape[0]
    if z_v_t.shape[1:] != (cfg.T_v, cfg.P_v) or z_a_t.shape[1:] != (cfg.T_a, cfg.P_a):
        raise ShapeError(f"latent shapes {z_v_t.shape}, {z_a_t.shape} do not match model config")
    t_v = np.broadcast_to(np.asarray(t_v, dtype=np.float64), (B,))
    t_a = np.broadcast_to(np.asarray(t_a, dtype=np.float64), (B,))
    if np.any((t_v < 0) | (t_v > 1) | (t_a < 0) | (t_a > 1)):
        raise ValueError("timesteps must lie in [0, 1]")
    d, H = cfg.d_model, cfg.heads

    def temb(t):
        x = timestep_features(t, cfg.t_freq) @ P["temb.1.w"] + P["temb.1.b"]
        return tn.silu(x) @ P["temb.2.w"] + P["temb.2.b"]

    c_v = tn.silu(temb(t_v) + conds.prompt_emb @ P["v.prompt.w"])
    c_a = tn.silu(temb(t_a))

    h_v = z_v_t @ P["v.in.w"] + P["v.in.b"]
    audio_tok = z_a_t @ P["a.in.w"] + P["a.in.b"]
    ref, speech, prompt, present = _cond_tokens(P, conds, cfg)
    h_a, pos_a, a_sl = assemble_audio_stream(ref, audio_tok, speech, prompt, cfg.T_r)
    pos_v = np.arange(cfg.T_v, dtype=np.float64)
    n_pre = cfg.T_r + 2
    trace_out = [] if trace else None
    style_applied = False
    zeros_pre = np.zeros((B, n_pre, d))

    for l in range(cfg.layers):
        try:
            if icfg.mode == "gldi":
                z_r = h_a[:, : cfg.T_r]
                upd = _style_delta(tn.layer_norm(z_r), tn.layer_norm(h_v), _xweights(P, l, "style"), H, present)
                h_a = tn.concat([z_r + upd, h_a[:, cfg.T_r :]], axis=1)
                style_applied = bool(present.any())

            sv1, gv1, sv2, gv2 = _chunks(c_v @ P[f"v{l}.mod.w"] + P[f"v{l}.mod.b"], 4, d)
            sa1, ga1, sa2, ga2 = _chunks(c_a @ P[f"a{l}.mod.w"] + P[f"a{l}.mod.b"], 4, d)
            dv = _self_attention(P, f"v{l}", _modulate(h_v, sv1, gv1), pos_v, cfg)
            da = _self_attention(P, f"a{l}", _modulate(h_a, sa1, ga1), pos_a, cfg)

            if icfg.mode != "none":
                xv = tn.layer_norm(h_v)
                xa = tn.layer_norm(h_a[:, a_sl])
                a2v, w_a2v = framewise_cross_attention(
                    xv, xa, _xweights(P, l, "a2v"), icfg, H, cfg.rope_base, "a2v", return_weights=True
                )
                v2a = framewise_cross_attention(xa, xv, _xweights(P, l, "v2a"), icfg, H, cfg.rope_base, "v2a")
                dv = dv + a2v
                da = da + tn.concat([zeros_pre, v2a], axis=1)
                if trace:
                    trace_out.append(np.array(w_a2v.data))

            h_v = h_v + dv
            h_a = h_a + da
            h_v = h_v + _mlp(P, f"v{l}", _modulate(h_v, sv2, gv2))
            h_a = h_a + _mlp(P, f"a{l}", _modulate(h_a, sa2, ga2))
        except NumericalError as e:
            raise NumericalError(f"layer {l}: {e}", layer=l) from e

    def head(h, c, m):
        shift, scale = _chunks(c @ P[m + ".final.w"] + P[m + ".final.b"], 2, d)
        return _modulate(h, shift, scale) @ P[m + ".out.w"] + P[m + ".out.b"]

    try:
        eps_v = head(h_v, c_v, "v")
        eps_a = head(h_a[:, a_sl], c_a, "a")
        if cfg.eps_skip:
            eps_v = z_v_t + eps_v * (1.0 - t_v)[:, None, None]
            eps_a = z_a_t + eps_a * (1.0 - t_a)[:, None, None]
    except NumericalError as e:
        raise NumericalError(f"output head: {e}", layer=cfg.layers) from e
    return ForwardOut(eps_v, eps_a, trace_out, style_applied, {"t_v": t_v.copy(), "t_a": t_a.copy()})
