"""Mitigation grid over several seeds.

Runs every arm of the config (plus its LoRA rank sweep) for each seed, writes
per-seed results and the averaged table, and plots the seed-averaged text
importance profile of each arm next to the pretrained one.

    python3 scripts/run_seed_grid.py --config configs/small.json --seeds 0,1,2,3,4
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

from modalshift import pipeline
from modalshift.config import load_config
from modalshift.report import csv_bytes, layer_profile_plot, results_table

SUMMARY = ("t2t", "s2t", "text_ppl", "speech_ppl", "shift_l1", "cluster_summary")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/small.json")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--no-sweep", action="store_true", help="skip the LoRA rank sweep")
    args = ap.parse_args()
    base = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, profiles = [], {}
    for s in seeds:
        rc = replace(base, seed=s).resolved().validate()
        print(f"seed {s}: pretraining", file=sys.stderr)
        data = pipeline.build_data(rc)
        pre = pipeline.pretrain_model(rc, data).model
        grid = pipeline.run_grid(rc, pre, data, arms=rc.arms if args.no_sweep else None, progress=lambda m: print(f"seed {s}: {m}", file=sys.stderr))
        for label, exc in grid.failures.items():
            print(f"seed {s}: arm {label} failed: {exc}", file=sys.stderr)
        rows += grid.rows
        for k, p in grid.profiles.items():
            profiles.setdefault(k, []).append(p.normalized())
    out = base.run_dir(args.out) / f"seeds-{'-'.join(map(str, seeds))}"
    prov = {"config_hash": base.hash(), "seed": ",".join(map(str, seeds))}
    results_table(rows, prov, stem="results_per_seed").write(out)
    summary = []
    for arm in dict.fromkeys(r["arm"] for r in rows):
        sel = [r for r in rows if r["arm"] == arm]
        entry = {"arm": arm, "n_seeds": len(sel)}
        for key in SUMMARY:
            vals = [r[key] for r in sel if r[key] is not None]
            entry[key] = float(np.mean(vals)) if vals else None
        summary.append(entry)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results_mean.csv").write_bytes(csv_bytes(("arm", "n_seeds", *SUMMARY), summary, prov))
    mean_profiles = {k: np.mean(v, axis=0) for k, v in profiles.items()}
    layer_profile_plot(mean_profiles, prov, title="Seed-averaged textual importance by layer").write(out)
    print(f"{'arm':<12}" + "".join(f"{k:>16}" for k in SUMMARY))
    for e in summary:
        print(f"{e['arm']:<12}" + "".join(f"{'-' if e[k] is None else format(e[k], '.4f'):>16}" for k in SUMMARY))
    print(f"written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
