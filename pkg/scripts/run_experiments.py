#!/usr/bin/env python3
"""Reference run: convergence curves, the five-row ablation and the drift probe.

Writes CSVs plus summary.json files under --out and prints one line per
directional claim.  Default sizes take roughly 40 minutes on one CPU core;
set HARMONY_THREADS to train independent cells in parallel.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from harmonylab.evaluate import (
    ablation_grid,
    convergence_experiment,
    default_convergence_spec,
    drift_probe,
)
from harmonylab.model import InteractionConfig
from harmonylab.synth import make_dataset
from harmonylab.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/reference")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    sys.stdout.reconfigure(line_buffering=True)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    train = TrainConfig(steps=args.steps)
    spec = default_convergence_spec(seeds=tuple(args.seeds), out=str(out / "convergence"))
    spec = replace(spec, variants=tuple(replace(v, train=train) for v in spec.variants))
    cache = {}

    t0 = time.perf_counter()
    conv = convergence_experiment(spec, cache)
    t_conv = time.perf_counter() - t0
    print(f"convergence: {t_conv:.0f} s")
    for name, c in conv.claims.items():
        print(f"  {'PASS' if c['passed'] else 'FAIL'} {name}: {json.dumps(c['per_seed_signs'])}")

    if not args.skip_ablation:
        t1 = time.perf_counter()
        abl = ablation_grid(replace(spec, out=str(out / "ablation")), train=train, cache=cache)
        print(f"ablation: {time.perf_counter() - t1:.0f} s")
        for r in abl.rows:
            print(f"  {r['row']} {r['name']:<9} {r['sync_score']:.3f}  {[round(x, 3) for x in r['per_seed']]}")
        for name, c in abl.claims.items():
            print(f"  {'PASS' if c['passed'] else 'FAIL'} {name}")

    held = make_dataset(spec.gen, spec.clips_per_eval, spec.eval_seed)
    params = conv.checkpoints[("cts", spec.seeds[0])][-1][1]
    rows = drift_probe(params, held, spec.mcfg, InteractionConfig(), out=out / "drift" / "drift.csv")
    print("drift:", ", ".join(f"t={t}: {d:.3f}" for t, d in rows))
    print(f"total: {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
