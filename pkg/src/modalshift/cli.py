"""Command-line entry point.

Subcommands write everything under the run directory
``{out}/{name}-{config hash[:12]}``; ``--out`` beats the ``MODALSHIFT_OUT``
environment variable, which beats ``out_dir`` in the config. Exit codes:
0 success, 2 usage or config error, 3 data or integrity error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline, report
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ENV_OUT, RunConfig, default_config, load_config
from .errors import ConfigError, ModalShiftError
from .importance import (
    aggregate_layers,
    estimate_importance,
    load_importance,
    parameter_change_map,
    rank_cluster_map,
    save_importance,
)

COMMANDS = ("pretrain", "importance", "deactivate", "rank-cluster", "grid", "report")


class Run:
    """Resolved config plus the run directory and its manifest."""

    def __init__(self, rc: RunConfig, root, dry_run: bool):
        self.rc = rc
        self.dir = rc.run_dir(root)
        self.dry_run = dry_run
        self.prov = rc.provenance()

    def path(self, name: str) -> Path:
        return self.dir / name

    def write(self, name: str, blob: bytes) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        p.write_bytes(blob)
        return p

    def record(self, command: str, outputs: list[Path]) -> None:
        """Add output hashes to ``manifest.json``; the timestamp lives only in ``updated``."""
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        manifest.update(config=self.rc.to_dict(), config_hash=self.rc.hash(), seed=self.rc.seed)
        files = manifest.setdefault("outputs", {})
        for p in outputs:
            files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest.setdefault("commands", [])
        if command not in manifest["commands"]:
            manifest["commands"].append(command)
        manifest["updated"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.write("manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())

    def checkpoint(self, arg: str | None, default: str = "pretrain.ckpt") -> Path:
        if arg is None:
            p = self.path(default)
        else:
            p = Path(arg)
            if not p.exists() and self.path(arg).exists():
                p = self.path(arg)
        return p


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _row_text(row: dict) -> str:
    return ", ".join(f"{k}={v if isinstance(v, str) else report.fmt_value(v)}" for k, v in row.items())


def _plan(run: Run, steps: list[str]) -> int:
    print(f"run directory: {run.dir}")
    for s in steps:
        print(f"  - {s}")
    return 0


# -- commands ----------------------------------------------------------------------
def cmd_pretrain(run: Run, args) -> int:
    rc = run.rc
    steps = pipeline.grid_plan(rc)[:2] + ["write pretrain.ckpt, metrics_pretrain.csv"]
    if rc.align.epochs > 0:
        steps.append(f"speech adaptation: {rc.align.epochs} epochs at lr {rc.align.base_lr:g}; write aligned.ckpt")
    if run.dry_run:
        return _plan(run, steps)
    data = pipeline.build_data(rc)
    _say("pretraining")
    pre = pipeline.pretrain_model(rc, data)
    outs = [run.path("pretrain.ckpt")]
    run.dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pre.model, outs[0], {"stage": "pretrain"})
    outs.append(run.write("metrics_pretrain.csv", report.metrics_csv(pre.log, run.prov)))
    if rc.align.epochs > 0:
        _say("speech adaptation")
        al = pipeline.align_model(rc, pre.model, data)
        outs.append(run.path("aligned.ckpt"))
        save_checkpoint(al.model, outs[-1], {"stage": "aligned"})
        outs.append(run.write("metrics_align.csv", report.metrics_csv(al.log, run.prov)))
    run.record("pretrain", outs)
    for p in outs:
        print(p)
    return 0


def _map_name(ckpt: Path, modality: str) -> str:
    return f"importance_{ckpt.stem}_{modality}.msim"


def _importance(run: Run, ckpt: Path, model, modality: str, data=None):
    data = data or pipeline.build_data(run.rc)
    imap = estimate_importance(model, data.probe, modality)
    path = run.path(_map_name(ckpt, modality))
    run.dir.mkdir(parents=True, exist_ok=True)
    save_importance(imap, run.rc.model, path)
    return imap, path


def cmd_importance(run: Run, args) -> int:
    ckpt = run.checkpoint(args.checkpoint)
    modalities = ["text", "speech"] if args.modality == "both" else [args.modality]
    if run.dry_run:
        return _plan(run, [f"importance of {ckpt.name} on {m} probe -> {_map_name(ckpt, m)}" for m in modalities])
    model = load_checkpoint(ckpt, expect=run.rc.model)
    data = pipeline.build_data(run.rc)
    outs = []
    for mod in modalities:
        imap, path = _importance(run, ckpt, model, mod, data)
        prof = aggregate_layers(imap, run.rc.model.n_layers)
        rep = report.layer_profile_plot({f"{ckpt.stem}-{mod}": prof}, run.prov, stem=f"profile_{ckpt.stem}_{mod}")
        outs += [path, *rep.write(run.dir)]
    run.record("importance", outs)
    for p in outs:
        print(p)
    return 0


def cmd_deactivate(run: Run, args) -> int:
    default = "aligned.ckpt" if run.path("aligned.ckpt").exists() else "pretrain.ckpt"
    ckpt = run.checkpoint(args.checkpoint, default)
    modalities = ("text", "speech") if args.modality == "both" else (args.modality,)
    modes = ("top", "bottom", "random") if args.mode is None else (args.mode,)
    fraction = run.rc.fraction if args.fraction is None else args.fraction
    stem = f"deactivation_{ckpt.stem}"
    if run.dry_run:
        return _plan(run, [f"deactivate {fraction:g} of {ckpt.name} ({', '.join(modes)}) on {', '.join(modalities)} -> {stem}.csv"])
    model = load_checkpoint(ckpt, expect=run.rc.model)
    data = pipeline.build_data(run.rc)
    maps = {}
    for mod in modalities:
        path = Path(args.map) if args.map else run.path(_map_name(ckpt, mod))
        if path.exists():
            maps[mod] = load_importance(path, expect=run.rc.model)
        else:
            _say(f"computing {mod} importance for {ckpt.name}")
            maps[mod], _ = _importance(run, ckpt, model, mod, data)
    rep = report.deactivation_report(
        model, maps, data.pretrain_eval, run.prov, fraction, run.rc.seed, modalities, modes
    )
    rep.files = {f"{stem}.csv": rep.files["deactivation.csv"]}
    outs = rep.write(run.dir)
    run.record("deactivate", outs)
    for row in rep.payload["rows"]:
        print(_row_text(row))
    return 0


def cmd_rank_cluster(run: Run, args) -> int:
    ckpt = run.checkpoint(args.checkpoint)
    mod = "text" if args.modality == "both" else args.modality
    matrix = args.matrix or run.rc.heatmap_matrix
    stem = f"rank_cluster_{ckpt.stem}_{mod}_{matrix}"
    if run.dry_run:
        return _plan(run, [f"rank clustering of {matrix} ({mod} importance of {ckpt.name}) -> {stem}.pgm/.svg"])
    model = load_checkpoint(ckpt, expect=run.rc.model)
    path = Path(args.map) if args.map else run.path(_map_name(ckpt, mod))
    imap = load_importance(path, expect=run.rc.model) if path.exists() else _importance(run, ckpt, model, mod)[0]
    rcm = rank_cluster_map(imap, matrix, run.rc.top_fraction)
    outs = []
    scores = report.unit_scale(imap.scores[matrix])
    outs += report.heatmap_export(scores, run.prov, f"importance_{ckpt.stem}_{mod}_{matrix}", "rank-cluster-heatmap").write(run.dir)
    outs += report.heatmap_export(rcm.density, run.prov, stem, "rank-cluster-heatmap", extra={"summary": rcm.summary}).write(run.dir)
    row = {"matrix": matrix, "modality": mod, "top_fraction": rcm.top_fraction, "summary": rcm.summary}
    outs.append(run.write(f"{stem}.csv", report.csv_bytes(tuple(row), [row], run.prov)))
    run.record("rank-cluster", outs)
    print(f"{matrix}: rank-cluster summary {rcm.summary:.4f}")
    return 0


def _grid_reports(run: Run, grid: dict) -> list[Path]:
    outs = report.results_table(grid["rows"], run.prov).write(run.dir)
    profiles = {k: v for k, v in grid["profiles"].items()}
    outs += report.layer_profile_plot(profiles, run.prov, title="Textual importance by layer").write(run.dir)
    return outs


def cmd_grid(run: Run, args) -> int:
    rc = run.rc
    if run.dry_run:
        return _plan(run, pipeline.grid_plan(rc))
    data = pipeline.build_data(rc)
    ckpt = run.path("pretrain.ckpt")
    if ckpt.exists():
        pre = load_checkpoint(ckpt, expect=rc.model)
    else:
        _say("no pretrained checkpoint; pretraining first")
        pre = pipeline.pretrain_model(rc, data).model
        run.dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(pre, ckpt, {"stage": "pretrain"})
    grid = pipeline.run_grid(rc, pre, data, progress=_say)
    outs = [ckpt]
    blob = grid.to_dict()
    outs.append(run.write("grid.json", (json.dumps(blob, indent=2, sort_keys=True) + "\n").encode()))
    outs += _grid_reports(run, blob)
    for label, arm in grid.arms.items():
        outs.append(run.write(f"metrics_{label}.csv", report.metrics_csv(arm.log, run.prov)))
        if arm.plan.strategy == "no-ft":
            continue
        change = parameter_change_map(pre, arm.model, rc.heatmap_matrix)
        rep = report.heatmap_export(change, run.prov, f"change_{label}_{rc.heatmap_matrix}", "change-heatmap")
        outs += rep.write(run.dir)
    run.record("grid", outs)
    for row in grid.rows:
        print(_row_text(row))
    for label, exc in grid.failures.items():
        _say(f"arm {label} failed: {exc}")
    if grid.failures:
        return max(e.exit_code for e in grid.failures.values())
    return 0


def cmd_report(run: Run, args) -> int:
    path = run.path("grid.json")
    if run.dry_run:
        return _plan(run, [f"rebuild results.csv and layer_profile.csv/.svg from {path}"])
    if not path.exists():
        raise ConfigError(f"{path} not found; run the grid command first")
    outs = _grid_reports(run, json.loads(path.read_text()))
    run.record("report", outs)
    for p in outs:
        print(p)
    return 0


HANDLERS = {
    "pretrain": cmd_pretrain,
    "importance": cmd_importance,
    "deactivate": cmd_deactivate,
    "rank-cluster": cmd_rank_cluster,
    "grid": cmd_grid,
    "report": cmd_report,
}


# -- argument handling -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (default: built-in defaults)")
    common.add_argument("--out", help=f"output root (overrides ${ENV_OUT} and the config)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--dry-run", action="store_true", help="print the execution plan and write nothing")

    parser = argparse.ArgumentParser(prog="modalshift", description="Parameter-importance analysis of speech fine-tuning on toy LMs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "pretrain": "text-pretrain the model (and run stage-1 speech adaptation)",
        "importance": "estimate parameter importance on a probe subset",
        "deactivate": "perplexity after deactivating top/bottom/random parameters",
        "rank-cluster": "row/column clustering heatmap of one matrix",
        "grid": "run the fine-tuning arms and write every table and figure",
        "report": "rebuild tables and plots from a finished grid",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name in ("importance", "deactivate", "rank-cluster"):
            p.add_argument("--checkpoint", help="checkpoint path (default: inside the run directory)")
            p.add_argument("--modality", choices=("text", "speech", "both"), default="both")
        if name in ("deactivate", "rank-cluster"):
            p.add_argument("--map", help="importance map file (default: computed or cached per checkpoint)")
        if name == "deactivate":
            p.add_argument("--fraction", type=float, help="share of parameters to deactivate")
            p.add_argument("--mode", choices=("top", "bottom", "random"), help="single mask mode (default: all three)")
        if name == "rank-cluster":
            p.add_argument("--matrix", help="parameter name, e.g. layer.0.wv")
        if name in ("grid", "pretrain"):
            p.add_argument("--lambda", dest="lam", type=float, help="layer-LR strength for layer-lr arms")
            p.add_argument("--lora-rank", type=int, help="run LoRA arms at this single rank")
    return parser


def resolve_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    lam = getattr(args, "lam", None)
    if lam is not None:
        rc = replace(rc, arms=tuple(replace(a, lam=lam) if a.strategy == "layer-lr" else a for a in rc.arms))
    rank = getattr(args, "lora_rank", None)
    if rank is not None:
        rc = replace(
            rc,
            arms=tuple(replace(a, lora_rank=rank, lora_alpha=None) if a.strategy == "lora" else a for a in rc.arms),
            lora_ranks=(rank,),
        )
    return rc.resolved().validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        rc = resolve_config(args)
        root = args.out or os.environ.get(ENV_OUT) or rc.out_dir
        return HANDLERS[args.command](Run(rc, root, args.dry_run), args)
    except ConfigError as exc:
        sub.print_usage(sys.stderr)
        _say(f"modalshift {args.command}: error: {exc}")
        return exc.exit_code
    except ModalShiftError as exc:
        _say(f"modalshift {args.command}: {type(exc).__name__}: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
