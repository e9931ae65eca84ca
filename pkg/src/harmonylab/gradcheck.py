"""Finite-difference suite: every differentiable op, then the full loss on a micro-model."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .rng import Rng, derive_seed
from .tensor import GradReport, finite_diff_check

# fixed operands, drawn once so each objective is a deterministic function of x
_R = Rng(77)
_B = _R.normal((3, 4))
_M = _R.normal((4, 2))
_W62 = _R.normal((6, 2))
_W44 = _R.normal((4, 4))
_MASK = np.array([[True, True, False, True]] * 3)

OPS = {
    "add": lambda x: tn.sum_sq(tn.add(x, _B)),
    "sub": lambda x: tn.sum_sq(tn.sub(_B, x)),
    "mul": lambda x: tn.sum_sq(tn.mul(x, _B)),
    "broadcast_mul": lambda x: tn.sum_sq(tn.mul(x, _B[:1])),
    "neg": lambda x: tn.sum_(tn.mul(tn.neg(x), _B)),
    "matmul": lambda x: tn.sum_sq(tn.matmul(x, _M)),
    "batched_matmul": lambda x: tn.sum_sq(tn.matmul(tn.reshape(x, (3, 1, 4)), _M)),
    "reshape_transpose": lambda x: tn.sum_(tn.mul(tn.transpose(tn.reshape(x, (2, 6)), (1, 0)), _W62)),
    "slice": lambda x: tn.sum_sq(x[1:, :3]),
    "concat": lambda x: tn.sum_sq(tn.mul(tn.concat([x, x[:1]], axis=0), _W44)),
    "softmax": lambda x: tn.sum_(tn.mul(tn.softmax(x), _B)),
    "masked_softmax": lambda x: tn.sum_(tn.mul(tn.softmax(x, mask=_MASK), _B)),
    "layer_norm": lambda x: tn.sum_(tn.mul(tn.layer_norm(x), _B)),
    "silu": lambda x: tn.sum_(tn.mul(tn.silu(x), _B)),
    "mean": lambda x: tn.sum_sq(tn.mean(x, axis=0)),
    "sum_axis": lambda x: tn.sum_sq(tn.sum_(x, axis=1)),
    "rope": lambda x: tn.sum_(tn.mul(tn.rope_apply(x, [0.3, 1.7, -2.5], 10.0), _B)),
    "sdpa": lambda x: tn.sum_sq(tn.sdpa(x, _B, _B, 0.5)),
}


def check_op(name: str, seed: int = 1, h: float = 1e-5, tol: float = 1e-4) -> GradReport:
    return finite_diff_check(OPS[name], Rng(derive_seed(seed, name)).normal((3, 4)), h=h, tol=tol)


def check_full_loss(seed: int = 1, h: float = 1e-5, tol: float = 1e-4) -> GradReport:
    """Total cross-task loss of a two-frame model, differentiated w.r.t. every weight."""
    from .model import ModelConfig, init_params
    from .synth import GenParams, make_dataset
    from .train import TrainConfig, loss_components

    gp = GenParams(T_v=2, T_a=2, T_c=2, P_v=4, P_a=4, K=1, smooth_w=0, T_r=2, d_c=4)
    mcfg = ModelConfig.from_gen(gp, d_model=8, heads=2, layers=1, mlp_hidden=8, t_freq=4)
    clips = make_dataset(gp, 2, derive_seed(seed, "gc-data"))
    r = Rng(derive_seed(seed, "gc-jitter"))
    # zero-initialised tensors (biases, output heads) would hide their own gradient paths
    params = {k: v + 0.2 * r.normal(v.shape) for k, v in init_params(mcfg, seed).items()}
    loss_seed = derive_seed(seed, "gc-loss")

    def f(leaves):
        total, _ = loss_components(leaves, clips, Rng(loss_seed), TrainConfig(), mcfg)
        return total

    return finite_diff_check(f, params, h=h, tol=tol)


def run_suite(seed: int = 1, tol: float = 1e-4) -> dict[str, GradReport]:
    reports = {f"op:{n}": check_op(n, seed, tol=tol) for n in sorted(OPS)}
    reports["loss:total"] = check_full_loss(seed, tol=tol)
    return reports
