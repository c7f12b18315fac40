"""End-to-end experiment: text pretraining, speech adaptation and the
mitigation grid (No-FT, Full-FT, Layer-LR, LoRA and a LoRA rank sweep).

Each arm starts from the same pretrained model and is scored on text and
speech answer accuracy, perplexity on both modalities, the shift of its text
importance profile away from the pretrained one, and how strongly its weight
updates cluster along rows and columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import Corpus, Example, World, answer_accuracy, generate_corpus, merge_examples, subsample
from .errors import ModalShiftError
from .importance import (
    LayerImportanceProfile,
    aggregate_layers,
    distribution_shift,
    estimate_importance,
    parameter_change_map,
    perplexity,
    rank_cluster_map,
)
from .model import TransformerLM, init_model, layer_index
from .training import TrainingPlan, TrainResult, train


@dataclass
class PipelineData:
    world: World
    corpora: dict[str, Corpus]
    pretrain_train: list[Example]
    pretrain_eval: list[Example]
    finetune: list[Example]
    probe: list[Example]
    accuracy_eval: list[Example]


def build_data(rc: RunConfig) -> PipelineData:
    """All corpora of a run share one world, so speech features and task maps agree."""
    m = rc.model
    world = World.build(m.vocab_size, m.feature_dim, rc.seed)
    corpora = {t.kind: generate_corpus(t, world) for t in rc.tasks}
    train_mix = merge_examples(*(c.train for c in corpora.values()))
    eval_mix = merge_examples(*(c.eval for c in corpora.values()))
    ft = merge_examples(*(corpora[k].train[:n] for k, n in rc.finetune_mix.items()))
    probe = subsample(train_mix, rc.probe_ratio, rc.seed)
    return PipelineData(world, corpora, train_mix, eval_mix, ft, probe, corpora[rc.accuracy_task].eval)


def pretrain_model(rc: RunConfig, data: PipelineData) -> TrainResult:
    return train(init_model(rc.model), data.pretrain_train, rc.pretrain, eval_examples=data.pretrain_eval)


def align_model(rc: RunConfig, pretrained: TransformerLM, data: PipelineData) -> TrainResult:
    """Stage-1 speech adaptation on the speech rendition of the pretraining mix."""
    return train(pretrained, data.pretrain_train, rc.align, eval_examples=data.pretrain_eval)


def block_matrices(model: TransformerLM) -> list[str]:
    return [n for n, p in model.params.items() if layer_index(n) is not None and p.ndim == 2]


def cluster_summary(before: TransformerLM, after: TransformerLM, top_fraction: float) -> float:
    """Mean rank-cluster summary of the change maps over every block matrix."""
    vals = []
    for name in block_matrices(before):
        change = parameter_change_map(before, after, name)
        if change.max() > 0:
            vals.append(rank_cluster_map(change, top_fraction=top_fraction).summary)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class ArmOutcome:
    label: str
    plan: TrainingPlan
    row: dict
    profile: LayerImportanceProfile
    log: list[dict]
    model: TransformerLM


@dataclass
class GridOutcome:
    rows: list[dict] = field(default_factory=list)
    profiles: dict[str, LayerImportanceProfile] = field(default_factory=dict)
    arms: dict[str, ArmOutcome] = field(default_factory=dict)
    failures: dict[str, ModalShiftError] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "profiles": {k: [float(x) for x in p.layers] for k, p in self.profiles.items()},
            "failures": {k: f"{type(e).__name__}: {e}" for k, e in self.failures.items()},
        }


def run_arm(
    rc: RunConfig, plan: TrainingPlan, pretrained: TransformerLM, data: PipelineData, base_profile: LayerImportanceProfile
) -> ArmOutcome:
    result = train(pretrained, data.finetune, plan, eval_examples=data.pretrain_eval, profile=base_profile)
    model = result.model
    profile = aggregate_layers(estimate_importance(model, data.probe, "text"), rc.model.n_layers)
    shift = distribution_shift(base_profile, profile)
    tuned = plan.strategy != "no-ft"
    row = {
        "arm": plan.label,
        "strategy": plan.strategy,
        "lora_rank": plan.lora_rank if plan.strategy == "lora" else None,
        "seed": rc.seed,
        "t2t": answer_accuracy(model, data.accuracy_eval, "text"),
        "s2t": answer_accuracy(model, data.accuracy_eval, "speech") if tuned else None,
        "text_ppl": perplexity(model, data.pretrain_eval, "text"),
        "speech_ppl": perplexity(model, data.pretrain_eval, "speech"),
        "shift_l1": shift["l1"],
        "peak_moved": shift["peak_moved"],
        "mass_ratio": shift["mass_ratio"],
        "cluster_summary": cluster_summary(pretrained, model, rc.top_fraction) if tuned else None,
    }
    return ArmOutcome(plan.label, plan, row, profile, result.log, model)


def run_grid(rc: RunConfig, pretrained: TransformerLM, data: PipelineData, arms=None, progress=None) -> GridOutcome:
    """Run every arm from ``pretrained``; a failing arm is recorded and skipped."""
    out = GridOutcome()
    base = aggregate_layers(estimate_importance(pretrained, data.probe, "text"), rc.model.n_layers)
    out.profiles["pretrained"] = base
    for plan in arms if arms is not None else rc.grid_arms():
        if progress:
            progress(f"arm {plan.label}")
        try:
            arm = run_arm(rc, plan, pretrained, data, base)
        except ModalShiftError as exc:
            out.failures[plan.label] = exc
            continue
        out.arms[arm.label] = arm
        out.rows.append(arm.row)
        out.profiles[arm.label] = arm.profile
    return out


def grid_plan(rc: RunConfig) -> list[str]:
    """Human-readable execution plan (used by dry runs)."""
    steps = [
        f"build data: tasks {[t.kind for t in rc.tasks]}, probe ratio {rc.probe_ratio:.4g}",
        f"pretrain: {rc.pretrain.epochs} epochs at lr {rc.pretrain.base_lr:g}",
    ]
    for plan in rc.grid_arms():
        extra = f" rank {plan.lora_rank}" if plan.strategy == "lora" else ""
        extra += f" lambda {plan.lam:g}" if plan.strategy == "layer-lr" else ""
        steps.append(f"arm {plan.label}: {plan.strategy}{extra}, {plan.epochs} epochs at lr {plan.base_lr:g}")
    steps.append("write results.csv, layer_profile.csv/.svg, change heatmaps, grid.json")
    return steps
