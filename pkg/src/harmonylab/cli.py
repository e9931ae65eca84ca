"""Command-line entry point: ``harmony <subcommand> [flags]``.

Exit codes: 0 success, 1 a check ran and failed, 2 bad config or usage,
3 numerical abort.  Progress goes to stderr; files are written only under
``--out``.  All randomness derives from ``--seed`` (and ``--data-seed`` for
the training set) through :func:`harmonylab.rng.derive_seed`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from .config import RunConfig, dumps_config, load_config
from .errors import ConfigError, CorruptCheckpoint, IncompatibleCheckpoint, NumericalError
from .evaluate import ablation_grid, convergence_experiment, drift_probe, summarize
from .latent import CondSet, Latent
from .persist import Checkpoint, checkpoint_id, load_checkpoint, read_header, save_checkpoint
from .rng import Rng, derive_seed
from .sample import NullAnchors, generate_latents, make_null_anchors
from .synth import ClipPair, GenParams, dump_dataset, load_dataset, make_dataset, sync_score
from .train import VARIANTS, train_run

log = logging.getLogger("harmonylab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    exp = cfg.experiment
    if getattr(args, "data_seed", None) is not None:
        exp = replace(exp, data_seed=args.data_seed)
    return replace(cfg, experiment=exp)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---- subcommands ----------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _config(args)
    out = _out(args)
    e = cfg.experiment
    for name, n, seed in (("train", e.n_train, e.data_seed), ("eval", e.clips_per_eval, e.eval_seed)):
        dump_dataset(make_dataset(cfg.gen_params, n, seed), cfg.gen_params, out / f"{name}.bin", {"seed": seed})
        log.info("wrote %s (%d clips, seed %d)", out / f"{name}.bin", n, seed)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    (out / "config.json").write_text(dumps_config(cfg))
    if args.data:
        data, gp, _ = load_dataset(args.data)
        if gp != cfg.gen_params:
            raise ConfigError("dataset was generated with different gen_params than the config")
    else:
        data = make_dataset(cfg.gen_params, cfg.experiment.n_train, cfg.experiment.data_seed)
    train = replace(cfg.train, seed=args.seed)
    mcfg = cfg.mcfg
    lineage = {
        "seed": args.seed,
        "data_seed": cfg.experiment.data_seed,
        "variant": args.variant,
        "gen_params": asdict(cfg.gen_params),
    }

    def save(state):
        save_checkpoint(Checkpoint(state, mcfg, train.interaction, lineage), out / f"ckpt_{state.step:06d}.hrmy")

    res = train_run(
        train,
        data,
        args.variant,
        mcfg,
        log_path=out / "metrics.csv",
        ckpt_hook=save,
        clock=None if args.deterministic_log else time.perf_counter,
    )
    save_checkpoint(Checkpoint(res.state, mcfg, train.interaction, lineage), out / "final.hrmy")
    log.info("trained %s for %d steps; final total loss %.5f", args.variant, res.state.step, res.rows[-1]["total"])
    return EXIT_OK


def _gen_params_of(ck: Checkpoint, cfg: RunConfig):
    gp = ck.lineage.get("gen_params")
    return GenParams(**gp) if gp else cfg.gen_params


def cmd_sample(args) -> int:
    cfg = _config(args)
    ck = load_checkpoint(args.checkpoint)
    gp = _gen_params_of(ck, cfg)
    sampler = cfg.sampler
    overrides = {k: v for k, v in (("guidance", args.guidance), ("s_v", args.sv), ("s_a", args.sa), ("s", args.s), ("steps", args.steps)) if v is not None}
    try:
        sampler = replace(sampler, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    n = args.n or cfg.experiment.clips_per_eval
    src = make_dataset(gp, n, cfg.experiment.eval_seed)
    conds = CondSet.stack([c.conds for c in src])
    anchors = NullAnchors.stack([make_null_anchors(gp, c.class_id) for c in src]) if sampler.guidance == "sync" else None
    rng = Rng(derive_seed(args.seed, "sample"))
    v, a = generate_latents(ck.state.params, conds, sampler, ck.interaction, ck.model, rng, anchors)
    clips = [
        ClipPair(Latent("video", v[i]), Latent("audio", a[i]), c.conds, c.truth, c.class_id) for i, c in enumerate(src)
    ]
    out = _out(args)
    dump_dataset(clips, gp, out / "samples.bin")
    summ = summarize([sync_score(v[i], a[i], gp) for i in range(n)])
    sidecar = {
        "seed": args.seed,
        "sampler": asdict(sampler),
        "checkpoint": str(args.checkpoint),
        "checkpoint_id": checkpoint_id(args.checkpoint),
        "eval_seed": cfg.experiment.eval_seed,
        "oracle": asdict(summ),
    }
    (out / "samples.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d pairs; oracle mean score %.4f", n, summ.mean_score)
    return EXIT_OK


def cmd_eval_convergence(args) -> int:
    cfg = _config(args)
    res = convergence_experiment(cfg.experiment_spec(str(_out(args))))
    for name, c in res.claims.items():
        print(f"{name}: {'pass' if c['passed'] else 'fail'} {json.dumps(c['per_seed_signs'])}")
    return EXIT_OK


def cmd_eval_ablation(args) -> int:
    cfg = _config(args)
    res = ablation_grid(cfg.experiment_spec(str(_out(args))), train=cfg.train)
    for r in res.rows:
        print(f"{r['row']} {r['name']:<9} {r['checkpoint_id']:<28} {r['sync_score']:.4f}")
    for name, c in res.claims.items():
        print(f"{name}: {'pass' if c['passed'] else 'fail'}")
    return EXIT_OK


def cmd_drift_probe(args) -> int:
    cfg = _config(args)
    ck = load_checkpoint(args.checkpoint)
    gp = _gen_params_of(ck, cfg)
    held = make_dataset(gp, cfg.experiment.clips_per_eval, cfg.experiment.eval_seed)
    rows = drift_probe(ck.state.params, held, ck.model, ck.interaction, seed=args.seed, out=_out(args) / "drift.csv")
    for t, d in rows:
        print(f"t={t:g} mean_dispersion={d:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.seed)
    worst = max(r.max_rel_err for r in reports.values())
    for name, r in reports.items():
        log.info("%-24s max_rel_err=%.3e at %s", name, r.max_rel_err, r.worst_coordinate)
    print(f"max_rel_err={worst:.6e}")
    return EXIT_OK if worst < 1e-4 else EXIT_FAIL


def cmd_inspect(args) -> int:
    raw = Path(args.path).read_bytes()
    if raw[:4] == b"HRMY":
        header, _ = read_header(raw)
        header = {k: v for k, v in header.items() if k != "manifest"} | {"tensors": len(header["manifest"])}
        print(json.dumps(header, indent=2, sort_keys=True))
        return EXIT_OK
    clips, gp, header = load_dataset(args.path)
    summ = summarize([sync_score(c.video, c.audio, gp) for c in clips])
    print(json.dumps({"header": header, "oracle": asdict(summ)}, indent=2, sort_keys=True))
    return EXIT_OK


# ---- dispatch -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="harmony", description="Desk-scale audio-video alignment lab.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add(name, fn, *flags):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        for f in flags:
            f(sp)
        return sp

    config = lambda sp: sp.add_argument("--config", help="RunConfig JSON")  # noqa: E731
    seed = lambda sp: sp.add_argument("--seed", type=int, default=0)  # noqa: E731
    out = lambda sp: sp.add_argument("--out", required=True)  # noqa: E731
    dseed = lambda sp: sp.add_argument("--data-seed", type=int)  # noqa: E731
    ckpt = lambda sp: sp.add_argument("--checkpoint", required=True)  # noqa: E731

    add("datagen", cmd_datagen, config, dseed, out)
    tr = add("train", cmd_train, config, seed, dseed, out)
    tr.add_argument("--variant", choices=VARIANTS, default="cts")
    tr.add_argument("--data", help="dataset file from datagen (default: generate from --data-seed)")
    tr.add_argument("--deterministic-log", action="store_true", help="write wall_ms as 0")
    sm = add("sample", cmd_sample, config, seed, ckpt, out)
    sm.add_argument("--guidance", choices=("none", "standard", "sync"))
    sm.add_argument("--sv", type=float)
    sm.add_argument("--sa", type=float)
    sm.add_argument("--s", type=float)
    sm.add_argument("--steps", type=int)
    sm.add_argument("--n", type=int, help="number of pairs (default clips_per_eval)")
    add("eval-convergence", cmd_eval_convergence, config, dseed, out)
    add("eval-ablation", cmd_eval_ablation, config, dseed, out)
    add("drift-probe", cmd_drift_probe, config, seed, ckpt, out)
    add("gradcheck", cmd_gradcheck, seed)
    ins = add("inspect", cmd_inspect)
    ins.add_argument("path")
    return p


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptCheckpoint, IncompatibleCheckpoint, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
