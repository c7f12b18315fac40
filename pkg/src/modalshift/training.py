"""Training strategies: text pretraining, full fine-tuning, layer-wise learning
rates driven by text importance, and LoRA."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Example, make_batches
from .errors import ConfigError, NumericalError
from .importance import LayerImportanceProfile, aggregate_layers, estimate_importance, perplexity
from .model import DEFAULT_LORA_TARGETS, TransformerLM, attach_lora, batch_loss, layer_index

STRATEGIES = ("pretrain-text", "full-ft", "layer-lr", "lora", "no-ft")


@dataclass(frozen=True)
class TrainingPlan:
    strategy: str = "full-ft"
    base_lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 32
    lam: float = 0.4
    lora_rank: int = 8
    lora_alpha: float | None = None
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    layer_lr_scope: str = "all"
    lora_targets: tuple[str, ...] = DEFAULT_LORA_TARGETS
    name: str | None = None

    def validate(self) -> "TrainingPlan":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"lambda must lie in [0, 1), got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and base_lr >= 0 required")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.layer_lr_scope not in ("all", "matrices"):
            raise ConfigError("layer_lr_scope must be 'all' or 'matrices'")
        return self

    @property
    def alpha(self) -> float:
        return 2.0 * self.lora_rank if self.lora_alpha is None else float(self.lora_alpha)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"lora-r{self.lora_rank}" if self.strategy == "lora" else self.strategy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPlan":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "lora_targets" in d:
            d["lora_targets"] = tuple(d["lora_targets"])
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(f"bad training plan: {exc}") from None


@dataclass
class LrSchedule:
    multipliers: np.ndarray
    lam: float
    status: str = "ok"
    scope: str = "all"

    def multiplier(self, name: str) -> float:
        i = layer_index(name)
        if i is None:
            return 1.0
        if self.scope == "matrices" and name.endswith("_norm"):
            return 1.0
        return float(self.multipliers[i])


def layer_lr_coefficients(profile: LayerImportanceProfile | np.ndarray, lam: float) -> LrSchedule:
    """``1 - lam * (I - min) / (max - min)`` per layer; flat profiles get 1.0."""
    layers = np.asarray(getattr(profile, "layers", profile), dtype=np.float64)
    if layers.size < 2:
        raise ConfigError("layer-wise schedule needs at least two layers")
    if not 0.0 <= lam < 1.0:
        raise ConfigError(f"lambda must lie in [0, 1), got {lam}")
    lo, hi = layers.min(), layers.max()
    if hi == lo:
        warnings.warn("flat layer importance profile; all learning-rate multipliers set to 1.0", stacklevel=2)
        return LrSchedule(np.ones_like(layers), lam, status="flat")
    return LrSchedule(1.0 - lam * (layers - lo) / (hi - lo), lam)


class Optimizer:
    """Adam or plain SGD with a fixed per-parameter learning-rate multiplier."""

    def __init__(self, params: dict[str, T.Tensor], plan: TrainingPlan, lr_mult: dict[str, float] | None = None):
        self.params = params
        self.plan = plan
        self.lr_mult = lr_mult or {}
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        self.t = 0

    def step(self) -> None:
        plan = self.plan
        self.t += 1
        b1, b2 = plan.beta1, plan.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            lr = plan.base_lr * self.lr_mult.get(n, 1.0)
            if plan.optimizer == "sgd":
                p.data = p.data - lr * g
                continue
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + plan.eps)


def clip_grad_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)
    norm = np.sqrt(sq)
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


@dataclass
class TrainResult:
    model: TransformerLM
    log: list[dict] = field(default_factory=list)
    schedule: LrSchedule | None = None
    profile: LayerImportanceProfile | None = None


def train(
    model: TransformerLM,
    examples: list[Example],
    plan: TrainingPlan,
    eval_examples: list[Example] | None = None,
    text_probe: list[Example] | None = None,
    profile: LayerImportanceProfile | None = None,
) -> TrainResult:
    """Train a copy of ``model`` according to ``plan``.

    Pretraining consumes the text rendition of ``examples``; every fine-tuning
    strategy consumes the speech rendition. For ``layer-lr`` the layer profile
    is ``profile`` if given, otherwise it is measured on ``model`` with
    ``text_probe``. The log holds per-epoch train loss and, when
    ``eval_examples`` is given, text and speech perplexity.
    """
    plan.validate()
    model = model.copy()
    result = TrainResult(model)
    if plan.strategy == "no-ft":
        return result
    modality = "text" if plan.strategy == "pretrain-text" else "speech"

    lr_mult: dict[str, float] = {}
    if plan.strategy == "layer-lr":
        if profile is None:
            if not text_probe:
                raise ConfigError("layer-lr needs a layer profile or text probe data")
            profile = aggregate_layers(estimate_importance(model, text_probe, "text"), model.cfg.n_layers)
        schedule = layer_lr_coefficients(profile, plan.lam)
        schedule.scope = plan.layer_lr_scope
        lr_mult = {n: schedule.multiplier(n) for n in model.params}
        result.schedule, result.profile = schedule, profile
    elif plan.strategy == "lora":
        attach_lora(model, plan.lora_targets, plan.lora_rank, plan.alpha, seed=plan.seed + 7919)

    params = model.trainable_parameters()
    opt = Optimizer(params, plan, lr_mult)
    rng = np.random.default_rng(plan.seed)
    step = 0
    for epoch in range(1, plan.epochs + 1):
        losses = []
        for batch in make_batches(examples, modality, plan.batch_size, rng):
            for p in params.values():
                p.grad = None
            loss = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at step {step}, epoch {epoch}, example ids {batch.ids[:8]}")
            loss.backward()
            if plan.max_grad_norm is not None:
                clip_grad_norm(params, plan.max_grad_norm)
            opt.step()
            losses.append(value)
            step += 1
        for p in params.values():
            p.grad = None
        result.log.append({"epoch": epoch, "split": "train", "metric": "loss", "value": float(np.mean(losses))})
        if eval_examples:
            for mod in ("text", "speech"):
                result.log.append(
                    {"epoch": epoch, "split": "eval", "metric": f"{mod}_ppl", "value": perplexity(model, eval_examples, mod)}
                )
    return result


def with_seed(plan: TrainingPlan, seed: int) -> TrainingPlan:
    return replace(plan, seed=seed)
