"""Run configuration: one JSON document describing a whole experiment.

Schema (every key optional; omitted keys take the defaults below)::

    {
      "name": str,                       run label, prefixes the run directory
      "seed": int,                       global seed; overrides every nested seed
      "model": {ModelConfig fields},
      "tasks": [{TaskSpec fields}, ...], text-pretraining mix (also the probe pool)
      "finetune_mix": {kind: n | null},  speech fine-tuning data: first n train
                                         examples of each task (null = all)
      "accuracy_task": str,              task scored for T2T / S2T accuracy
      "pretrain": {TrainingPlan fields}, strategy must be "pretrain-text"
      "align": {TrainingPlan fields},    stage-1 speech adaptation of the
                                         pretrained model on the whole pretraining
                                         mix; used for deactivation tables
      "arms": [{TrainingPlan fields}, ...],
      "lora_ranks": [int, ...],          extra LoRA arms (rank sweep)
      "probe_ratio": float,              share of pretraining data used as probe
      "fraction": float,                 deactivation fraction
      "top_fraction": float,             Top share for rank-cluster maps
      "heatmap_matrix": str,             matrix rendered in heatmaps
      "out_dir": str                     output root (not part of the hash)
    }

The run directory is ``{out_dir}/{name}-{hash[:12]}`` where ``hash`` is the
sha256 of the canonical JSON of the resolved config without ``out_dir``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .checkpoint import canonical_json
from .data import TaskSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainingPlan

ENV_OUT = "MODALSHIFT_OUT"


def _default_tasks() -> tuple[TaskSpec, ...]:
    return (TaskSpec("toy-qa"), TaskSpec("copy"), TaskSpec("markov-text"))


def _default_arms() -> tuple[TrainingPlan, ...]:
    return (
        TrainingPlan("no-ft"),
        TrainingPlan("full-ft", base_lr=1e-3),
        TrainingPlan("layer-lr", base_lr=1e-3),
        TrainingPlan("lora", base_lr=1e-3, lora_rank=8),
    )


@dataclass(frozen=True)
class RunConfig:
    name: str = "default"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: tuple[TaskSpec, ...] = field(default_factory=_default_tasks)
    finetune_mix: dict = field(default_factory=lambda: {"copy": None, "toy-qa": 500})
    accuracy_task: str = "toy-qa"
    pretrain: TrainingPlan = field(default_factory=lambda: TrainingPlan("pretrain-text", base_lr=1e-3, epochs=3))
    align: TrainingPlan = field(default_factory=lambda: TrainingPlan("full-ft", base_lr=1e-3, epochs=2))
    arms: tuple[TrainingPlan, ...] = field(default_factory=_default_arms)
    lora_ranks: tuple[int, ...] = (8, 16, 24)
    probe_ratio: float = 1.0 / 30.0
    fraction: float = 0.03
    top_fraction: float = 0.05
    heatmap_matrix: str = "layer.0.wv"
    out_dir: str = "runs"

    # -- resolution & validation ------------------------------------------------
    def resolved(self) -> "RunConfig":
        """Copy with every nested seed and shared dimension tied to the globals."""
        s = self.seed
        tasks = tuple(
            replace(t, seed=s, world_seed=s, vocab_size=self.model.vocab_size, feature_dim=self.model.feature_dim)
            for t in self.tasks
        )
        return replace(
            self,
            model=replace(self.model, seed=s),
            tasks=tasks,
            pretrain=replace(self.pretrain, seed=s),
            align=replace(self.align, seed=s),
            arms=tuple(replace(a, seed=s) for a in self.arms),
        )

    def validate(self) -> "RunConfig":
        self.model.validate()
        kinds = [t.kind for t in self.tasks]
        if not kinds or len(set(kinds)) != len(kinds):
            raise ConfigError("tasks must list each task kind once and be non-empty")
        for t in self.tasks:
            t.validate()
        for kind in self.finetune_mix:
            if kind not in kinds:
                raise ConfigError(f"finetune_mix names task {kind!r} that is not in tasks")
        if self.accuracy_task not in kinds:
            raise ConfigError(f"accuracy_task {self.accuracy_task!r} is not in tasks")
        if self.pretrain.strategy != "pretrain-text":
            raise ConfigError("pretrain plan must use the pretrain-text strategy")
        for plan in (self.pretrain, self.align, *self.arms):
            plan.validate()
        if any(a.strategy == "pretrain-text" for a in self.arms):
            raise ConfigError("arms are fine-tuning strategies; pretrain-text is not allowed")
        labels = [a.label for a in self.grid_arms()]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"arm labels must be unique, got {labels}")
        if any(r < 1 for r in self.lora_ranks):
            raise ConfigError("lora_ranks must be >= 1")
        if not 0.0 < self.probe_ratio <= 1.0:
            raise ConfigError("probe_ratio must lie in (0, 1]")
        if not 0.0 <= self.fraction < 1.0 or not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("fraction must lie in [0, 1) and top_fraction in (0, 1]")
        return self

    def grid_arms(self) -> list[TrainingPlan]:
        """Configured arms followed by the LoRA rank sweep (ranks already present are skipped)."""
        arms = list(self.arms)
        lora = [a for a in arms if a.strategy == "lora"]
        have = {a.lora_rank for a in lora}
        template = lora[0] if lora else TrainingPlan("lora", base_lr=self.pretrain.base_lr, seed=self.seed)
        for r in self.lora_ranks:
            if r not in have:
                arms.append(replace(template, lora_rank=r, lora_alpha=None, name=None))
                have.add(r)
        return arms

    # -- serialisation -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
            "finetune_mix": dict(self.finetune_mix),
            "accuracy_task": self.accuracy_task,
            "pretrain": self.pretrain.to_dict(),
            "align": self.align.to_dict(),
            "arms": [a.to_dict() for a in self.arms],
            "lora_ranks": list(self.lora_ranks),
            "probe_ratio": self.probe_ratio,
            "fraction": self.fraction,
            "top_fraction": self.top_fraction,
            "heatmap_matrix": self.heatmap_matrix,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig(**d["model"])
            if "tasks" in d:
                d["tasks"] = tuple(TaskSpec(**t) for t in d["tasks"])
            for key in ("pretrain", "align"):
                if key in d:
                    d[key] = TrainingPlan.from_dict(d[key])
            if "arms" in d:
                d["arms"] = tuple(TrainingPlan.from_dict(a) for a in d["arms"])
            if "lora_ranks" in d:
                d["lora_ranks"] = tuple(int(r) for r in d["lora_ranks"])
            return cls(**d).resolved().validate()
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()

    def run_dir(self, root=None) -> Path:
        return Path(root if root is not None else self.out_dir) / f"{self.name}-{self.hash()[:12]}"

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(data)


def default_config() -> RunConfig:
    return RunConfig().resolved().validate()
