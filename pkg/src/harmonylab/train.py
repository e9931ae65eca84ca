"""Flow-matching noising, the cross-task objective, and the Adam training loop.

The three loss terms share one batched forward: rows ``[joint | audio-driven |
video-driven]`` with the same noise and timestep per clip, where a driven
task feeds the conditioning modality clean at timestep 0.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import NumericalError
from .latent import CondSet
from .model import InteractionConfig, ModelConfig, ModelParams, forward_joint, init_params
from .rng import Rng, derive_seed
from .synth import ClipPair

log = logging.getLogger(__name__)

VARIANTS = ("joint_only", "cts", "a_driven_only", "v_driven_only")
METRICS_HEADER = ["step", "variant", "L_joint", "L_a_driven", "L_v_driven", "total", "sync_joint", "sync_driven", "wall_ms"]
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lambda_v: float = 0.1
    lambda_a: float = 0.3
    shift: float = 5.0
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    task_mix: str = "summed"
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    seed: int = 0
    cond_drop: float = 0.1
    ckpt_interval: int = 200

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be non-negative")
        if self.shift < 1:
            raise ValueError("shift must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.task_mix not in ("summed", "sampled"):
            raise ValueError(f"unknown task_mix {self.task_mix!r}")


@dataclass
class LossBreakdown:
    L_joint: float
    L_a_driven: float
    L_v_driven: float
    total: float


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int
    rng: Rng

    @classmethod
    def fresh(cls, params: ModelParams, seed: int) -> "TrainState":
        zeros = lambda: {k: np.zeros_like(p) for k, p in params.items()}  # noqa: E731
        return cls(params, zeros(), zeros(), 0, Rng(derive_seed(seed, "train")))


def interp_noise(z0, eps, t):
    """``(1 - t) * z0 + t * eps``; ``t`` is a scalar or broadcasts over the leading axis."""
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1.0 - t) * z0 + t * eps


def sample_time(u, shift: float):
    """Shifted timestep ``shift * u / (1 + (shift - 1) * u)``."""
    if shift < 1:
        raise ValueError("shift must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    return shift * u / (1.0 + (shift - 1.0) * u)


def variant_weights(variant: str, cfg: TrainConfig) -> tuple[float, float, float]:
    """Weights of ``(L_joint, L_a_driven, L_v_driven)`` in the total loss."""
    if variant == "cts":
        return 1.0, cfg.lambda_v, cfg.lambda_a
    if variant == "joint_only":
        return 1.0, 0.0, 0.0
    if variant == "a_driven_only":
        return 0.0, 1.0, 0.0
    if variant == "v_driven_only":
        return 0.0, 0.0, 1.0
    raise ValueError(f"unknown variant {variant!r}")


def _mse(pred, target: np.ndarray):
    d = pred - target
    return tn.mean(d * d)


@dataclass
class _Batch:
    z_v0: np.ndarray
    z_a0: np.ndarray
    conds: CondSet


def stack_clips(clips: list[ClipPair]) -> _Batch:
    return _Batch(
        np.stack([c.video.frames for c in clips]),
        np.stack([c.audio.frames for c in clips]),
        CondSet.stack([c.conds for c in clips]),
    )


def _drop_conds(conds: CondSet, keep: np.ndarray) -> CondSet:
    k = keep.astype(np.float64)
    ref_present = k if conds.ref_present is None else conds.ref_present * k
    return CondSet(conds.prompt_emb * k[:, None], conds.speech_emb * k[:, None], conds.reference, ref_present)


def _tile(c: CondSet, n: int) -> CondSet:
    rp = None if c.ref_present is None else np.tile(c.ref_present, n)
    ref = None if c.reference is None else np.tile(c.reference, (n, 1, 1))
    return CondSet(np.tile(c.prompt_emb, (n, 1)), np.tile(c.speech_emb, (n, 1)), ref, rp)


def loss_components(
    params,
    clips: list[ClipPair] | _Batch,
    rng: Rng,
    cfg: TrainConfig,
    mcfg: ModelConfig,
    weights: tuple[float, float, float] | None = None,
    forward: Callable | None = None,
):
    """Draw noise and timesteps, run the task rows, return ``(total_tensor, LossBreakdown)``.

    ``weights`` defaults to the cross-task weights ``(1, lambda_v, lambda_a)``.
    Rows of zero-weight tasks are evaluated without a gradient tape.
    ``forward`` replaces the model (same signature as :func:`forward_joint`
    minus ``icfg``/``cfg``); used to plug in oracle predictors.
    """
    b = clips if isinstance(clips, _Batch) else stack_clips(clips)
    B = b.z_v0.shape[0]
    w = (1.0, cfg.lambda_v, cfg.lambda_a) if weights is None else weights
    u = rng.uniform(B)
    t = sample_time(u, cfg.shift)
    eps_v = rng.normal(b.z_v0.shape)
    eps_a = rng.normal(b.z_a0.shape)
    conds = b.conds
    if cfg.cond_drop > 0:
        conds = _drop_conds(conds, rng.uniform(B) >= cfg.cond_drop)
    z_v_t = interp_noise(b.z_v0, eps_v, t)
    z_a_t = interp_noise(b.z_a0, eps_a, t)
    zero = np.zeros(B)
    rows = {
        "joint": (z_v_t, z_a_t, t, t),
        "a_driven": (z_v_t, b.z_a0, t, zero),
        "v_driven": (b.z_v0, z_a_t, zero, t),
    }
    names = ("joint", "a_driven", "v_driven")
    if cfg.task_mix == "sampled" and weights is None:
        probs = np.array(w) / sum(w)
        pick = int(np.searchsorted(np.cumsum(probs), rng.uniform(1)[0], side="right"))
        pick = min(pick, 2)
        w = tuple(sum(w) if i == pick else 0.0 for i in range(3))
        names = (names[pick],)

    fwd = forward or (lambda p, zv, za, c, tv, ta: forward_joint(p, zv, za, c, tv, ta, cfg.interaction, mcfg))

    def run(group, p):
        n = len(group)
        zv = np.concatenate([rows[g][0] for g in group])
        za = np.concatenate([rows[g][1] for g in group])
        tv = np.concatenate([rows[g][2] for g in group])
        ta = np.concatenate([rows[g][3] for g in group])
        out = fwd(p, zv, za, _tile(conds, n), tv, ta)
        res = {}
        for i, g in enumerate(group):
            sl = slice(i * B, (i + 1) * B)
            ev, ea = out.eps_v[sl], out.eps_a[sl]
            if g == "joint":
                res[g] = _mse(ev, eps_v) + _mse(ea, eps_a)
            elif g == "a_driven":
                res[g] = _mse(ev, eps_v)
            else:
                res[g] = _mse(ea, eps_a)
        return res

    wmap = dict(zip(("joint", "a_driven", "v_driven"), w))
    live = [g for g in names if wmap[g] > 0]
    idle = [g for g in names if wmap[g] == 0]
    terms = run(live, params) if live else {}
    if idle:
        frozen = {k: (v.data if isinstance(v, tn.Tensor) else v) for k, v in params.items()}
        terms.update(run(idle, frozen))
    total = None
    for g in live:
        term = terms[g] * wmap[g]
        total = term if total is None else total + term
    if total is None:
        total = tn.Tensor(0.0)
    # unevaluated terms (sampled mode) are reported as NaN
    vals = {g: (terms[g].item() if g in terms else math.nan) for g in ("joint", "a_driven", "v_driven")}
    bd = LossBreakdown(vals["joint"], vals["a_driven"], vals["v_driven"], total.item())
    return total, bd


def adam_update(state: TrainState, grads: dict, lr: float) -> None:
    state.step += 1
    k = state.step
    c1 = 1.0 - ADAM_B1**k
    c2 = 1.0 - ADAM_B2**k
    for name, g in grads.items():
        m = ADAM_B1 * state.m[name] + (1.0 - ADAM_B1) * g
        v = ADAM_B2 * state.v[name] + (1.0 - ADAM_B2) * g * g
        state.m[name], state.v[name] = m, v
        state.params[name] = state.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def train_step(
    state: TrainState,
    batch: list[ClipPair],
    cfg: TrainConfig,
    mcfg: ModelConfig,
    variant: str = "cts",
) -> tuple[TrainState, LossBreakdown]:
    if not batch:
        raise ValueError("empty batch")
    leaves = {k: tn.Tensor(v, requires_grad=True) for k, v in state.params.items()}
    try:
        total, bd = loss_components(leaves, batch, state.rng, cfg, mcfg, variant_weights(variant, cfg) if variant != "cts" else None)
    except NumericalError as e:
        raise NumericalError(f"step {state.step}: {e}", step=state.step) from e
    names = list(leaves)
    grads = dict(zip(names, tn.backward(total, [leaves[n] for n in names]))) if total.requires_grad else {}
    for n, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"step {state.step}: non-finite gradient for {n}", step=state.step)
    if grads:
        adam_update(state, grads, cfg.lr)
    else:
        state.step += 1
    return state, bd


def sample_batch(rng: Rng, dataset: list, batch: int) -> list:
    idx = np.floor(rng.uniform(batch) * len(dataset)).astype(int)
    return [dataset[i] for i in idx]


@dataclass
class RunResult:
    state: TrainState
    checkpoints: list[tuple[int, ModelParams]]
    rows: list[dict]


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def train_run(
    cfg: TrainConfig,
    dataset: list[ClipPair],
    variant: str,
    mcfg: ModelConfig,
    eval_hook: Callable[[ModelParams, int], tuple[float, float]] | None = None,
    log_path: str | Path | None = None,
    ckpt_hook: Callable[[TrainState], None] | None = None,
    init: ModelParams | None = None,
    clock: Callable[[], float] | None = time.perf_counter,
) -> RunResult:
    """Train one variant; snapshot at step 0 and every ``cfg.ckpt_interval`` steps.

    At each snapshot ``eval_hook(params, step)`` supplies ``(sync_joint,
    sync_driven)`` and a row is appended to the metrics CSV (if
    ``log_path``).  Loss columns average the steps since the last snapshot;
    the step-0 row evaluates the initial weights on one batch.  With
    ``clock=None`` the ``wall_ms`` column is written as 0 so identical seeds
    give byte-identical logs.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    params = init if init is not None else init_params(mcfg, derive_seed(cfg.seed, "init"))
    state = TrainState.fresh({k: v.copy() for k, v in params.items()}, cfg.seed)
    data_rng = Rng(derive_seed(cfg.seed, "batches"))
    weights = variant_weights(variant, cfg)
    rows: list[dict] = []
    checkpoints: list[tuple[int, ModelParams]] = []
    fh = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        fh.flush()
    t_start = clock() if clock else 0.0

    def snapshot(bds: list[LossBreakdown]):
        snap = {k: v.copy() for k, v in state.params.items()}
        checkpoints.append((state.step, snap))
        sj, sd = eval_hook(snap, state.step) if eval_hook else (math.nan, math.nan)
        mean = lambda f: float(np.mean([getattr(b, f) for b in bds]))  # noqa: E731
        row = {
            "step": state.step,
            "variant": variant,
            "L_joint": mean("L_joint"),
            "L_a_driven": mean("L_a_driven"),
            "L_v_driven": mean("L_v_driven"),
            "total": mean("total"),
            "sync_joint": sj,
            "sync_driven": sd,
            "wall_ms": int((clock() - t_start) * 1000) if clock else 0,
        }
        rows.append(row)
        if writer:
            writer.writerow([row["step"], variant] + [_fmt(row[k]) for k in METRICS_HEADER[2:8]] + [row["wall_ms"]])
            fh.flush()
        if ckpt_hook:
            ckpt_hook(state)
        log.info("step %d %s total=%.4f sync_joint=%s sync_driven=%s", state.step, variant, row["total"], _fmt(sj), _fmt(sd))

    try:
        probe_rng = Rng(derive_seed(cfg.seed, "step0-probe"))
        _, bd0 = loss_components(state.params, sample_batch(probe_rng, dataset, cfg.batch), probe_rng, cfg, mcfg, weights)
        snapshot([bd0])
        pending: list[LossBreakdown] = []
        for _ in range(cfg.steps):
            batch = sample_batch(data_rng, dataset, cfg.batch)
            state, bd = train_step(state, batch, cfg, mcfg, variant)
            pending.append(bd)
            if state.step % cfg.ckpt_interval == 0:
                snapshot(pending)
                pending = []
    finally:
        if fh:
            fh.close()
    return RunResult(state, checkpoints, rows)
