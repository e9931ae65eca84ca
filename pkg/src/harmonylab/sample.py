"""Euler sampling on the shifted time grid with optional CFG / SyncCFG.

Guidance combinations are written as ``(1 - s) * base + s * target`` so that
``s = 1`` returns ``target`` and ``s = 0`` returns ``base`` bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError
from .latent import CondSet, Latent
from .model import InteractionConfig, ModelConfig, forward_joint
from .rng import Rng
from .synth import GenParams, silent_audio_latent, static_video_latent
from .train import sample_time


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 40
    shift: float = 5.0
    guidance: str = "none"  # none | standard | sync
    s: float = 1.0
    s_v: float = 3.0
    s_a: float = 2.0
    div_guard: float = 1e-3
    text_cfg: bool = False  # compose a standard text-CFG pass on top of sync

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.s, self.s_v, self.s_a) < 0:
            raise ValueError("guidance scales must be >= 0")
        if self.guidance not in ("none", "standard", "sync"):
            raise ValueError(f"unknown guidance {self.guidance!r}")


@dataclass
class NullAnchors:
    audio_null: np.ndarray  # [B, T_a, P_a] or [T_a, P_a]
    video_null: np.ndarray

    @staticmethod
    def stack(anchors: list["NullAnchors"]) -> "NullAnchors":
        return NullAnchors(np.stack([a.audio_null for a in anchors]), np.stack([a.video_null for a in anchors]))


def standard_cfg(eps_uncond, eps_cond, s: float):
    return (1.0 - s) * eps_uncond + s * eps_cond


def sync_cfg_video(eps_joint_v, eps_driven_v_null, s_v: float):
    """Push the video prediction away from the silent-audio driven prediction."""
    return (1.0 - s_v) * eps_driven_v_null + s_v * eps_joint_v


def sync_cfg_audio(eps_joint_a, eps_driven_a_null, s_a: float):
    """Push the audio prediction away from the static-video driven prediction."""
    return (1.0 - s_a) * eps_driven_a_null + s_a * eps_joint_a


def make_null_anchors(params: GenParams, class_id: int) -> NullAnchors:
    audio = silent_audio_latent(params, class_id).frames
    video = static_video_latent(params.class_entry(class_id)["video_bias"], params.T_v).frames
    return NullAnchors(audio, video)


def eps_to_velocity(z_t, eps_hat, t, delta: float = 1e-3):
    """Flow drift ``(eps_hat - z_t) / max(1 - t, delta)`` for ``z_t = (1-t) z0 + t eps``."""
    return (eps_hat - z_t) / max(1.0 - float(t), delta)


def time_grid(steps: int, shift: float) -> np.ndarray:
    """``t_k = sample_time(k / steps, shift)`` for ``k = 0 .. steps``; ``t_0 = 0``, ``t_steps = 1``."""
    return sample_time(np.arange(steps + 1) / steps, shift)


Denoiser = Callable[[np.ndarray, np.ndarray, CondSet, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def model_denoiser(params, icfg: InteractionConfig, mcfg: ModelConfig) -> Denoiser:
    def fn(z_v, z_a, conds, t_v, t_a):
        out = forward_joint(params, z_v, z_a, conds, t_v, t_a, icfg, mcfg)
        return np.array(out.eps_v.data), np.array(out.eps_a.data)

    return fn


def _tile(c: CondSet, n: int) -> CondSet:
    rp = None if c.ref_present is None else np.tile(c.ref_present, n)
    ref = None if c.reference is None else np.tile(c.reference, (n, 1, 1))
    return CondSet(np.tile(c.prompt_emb, (n, 1)), np.tile(c.speech_emb, (n, 1)), ref, rp)


def _concat_conds(a: CondSet, b: CondSet) -> CondSet:
    return CondSet.stack([a, b])


def generate(
    denoiser: Denoiser,
    conds: CondSet,
    cfg: SamplerConfig,
    shapes: tuple[tuple[int, int], tuple[int, int]],
    rng: Rng,
    anchors: NullAnchors | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate from noise at ``t = 1`` down to ``t = 0``; returns ``(video, audio)`` batches.

    ``shapes`` is ``((T_v, P_v), (T_a, P_a))``.  ``conds`` may be batched; the
    batch size follows ``conds``.  Sync guidance runs the joint forward alone
    (same batch layout as unguided sampling) and both anchored driven
    forwards together.
    """
    conds = conds.as_batch()
    B = conds.prompt_emb.shape[0]
    (T_v, P_v), (T_a, P_a) = shapes
    if cfg.guidance == "sync":
        if anchors is None:
            raise ValueError("sync guidance needs null anchors")
        a_null = np.broadcast_to(anchors.audio_null, (B, T_a, P_a))
        v_null = np.broadcast_to(anchors.video_null, (B, T_v, P_v))
    z_v = rng.normal((B, T_v, P_v))
    z_a = rng.normal((B, T_a, P_a))
    grid = time_grid(cfg.steps, cfg.shift)
    zeros = np.zeros(B)
    uncond = conds.nulled()
    for k in range(cfg.steps, 0, -1):
        t = grid[k]
        dt = grid[k] - grid[k - 1]
        tb = np.full(B, t)
        if cfg.guidance == "none":
            ev, ea = denoiser(z_v, z_a, conds, tb, tb)
        elif cfg.guidance == "standard":
            ev2, ea2 = denoiser(
                np.concatenate([z_v, z_v]), np.concatenate([z_a, z_a]), _concat_conds(uncond, conds), np.tile(tb, 2), np.tile(tb, 2)
            )
            ev = standard_cfg(ev2[:B], ev2[B:], cfg.s)
            ea = standard_cfg(ea2[:B], ea2[B:], cfg.s)
        else:
            ev_j, ea_j = denoiser(z_v, z_a, conds, tb, tb)
            ev_d, ea_d = denoiser(
                np.concatenate([z_v, v_null]),
                np.concatenate([a_null, z_a]),
                _tile(conds, 2),
                np.concatenate([tb, zeros]),
                np.concatenate([zeros, tb]),
            )
            ev = sync_cfg_video(ev_j, ev_d[:B], cfg.s_v)
            ea = sync_cfg_audio(ea_j, ea_d[B:], cfg.s_a)
            if cfg.text_cfg:
                ev_u, ea_u = denoiser(z_v, z_a, uncond, tb, tb)
                ev = standard_cfg(ev_u, ev, cfg.s)
                ea = standard_cfg(ea_u, ea, cfg.s)
        z_v = z_v - dt * eps_to_velocity(z_v, ev, t, cfg.div_guard)
        z_a = z_a - dt * eps_to_velocity(z_a, ea, t, cfg.div_guard)
        if not (np.isfinite(z_v).all() and np.isfinite(z_a).all()):
            raise NumericalError(f"non-finite latent at sampling step {cfg.steps - k}", step=cfg.steps - k)
    return z_v, z_a


def generate_driven(
    denoiser: Denoiser,
    given0: np.ndarray,
    conds: CondSet,
    cfg: SamplerConfig,
    target_shape: tuple[int, int],
    rng: Rng,
    given: str = "audio",
) -> np.ndarray:
    """Driven generation: the ``given`` modality stays clean at timestep 0 throughout.

    ``given="audio"`` generates video from audio (the default); ``"video"``
    generates audio from video.
    """
    if given not in ("audio", "video"):
        raise ValueError(f"given must be 'audio' or 'video', not {given!r}")
    conds = conds.as_batch()
    B = conds.prompt_emb.shape[0]
    given0 = np.broadcast_to(given0, (B, *np.shape(given0)[-2:]))
    z = rng.normal((B, *target_shape))
    grid = time_grid(cfg.steps, cfg.shift)
    zeros = np.zeros(B)
    for k in range(cfg.steps, 0, -1):
        t = grid[k]
        tb = np.full(B, t)
        if given == "audio":
            eps, _ = denoiser(z, given0, conds, tb, zeros)
        else:
            _, eps = denoiser(given0, z, conds, zeros, tb)
        z = z - (grid[k] - grid[k - 1]) * eps_to_velocity(z, eps, t, cfg.div_guard)
        if not np.isfinite(z).all():
            raise NumericalError(f"non-finite latent at sampling step {cfg.steps - k}", step=cfg.steps - k)
    return z


def generate_latents(
    params,
    conds: CondSet,
    cfg: SamplerConfig,
    icfg: InteractionConfig,
    mcfg: ModelConfig,
    rng: Rng,
    anchors: NullAnchors | None = None,
) -> tuple[Latent, Latent] | tuple[np.ndarray, np.ndarray]:
    """Model-backed :func:`generate`; returns Latents for an unbatched ``conds``."""
    v, a = generate(model_denoiser(params, icfg, mcfg), conds, cfg, ((mcfg.T_v, mcfg.P_v), (mcfg.T_a, mcfg.P_a)), rng, anchors)
    if not conds.batched:
        return Latent("video", v[0]), Latent("audio", a[0])
    return v, a
