"""Parameter importance: first-order estimates, the exact nullification oracle,
deactivation masks, layer aggregation, and row/column clustering metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import KIND_IMPORTANCE, config_hash, encode_container, read_container
from .data import Example, make_batches
from .errors import BudgetError, ContractError, DegenerateInputError, IntegrityError
from .model import ModelConfig, TransformerLM, batch_loss, layer_index, merged_copy

AGGREGATIONS = ("batch_abs", "abs_of_mean")
EXACT_BUDGET = 10_000


@dataclass
class ImportanceMap:
    scores: dict[str, np.ndarray]
    modality: str
    n_examples: int
    aggregation: str = "batch_abs"

    def total(self) -> float:
        return float(sum(s.sum() for s in self.scores.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([s.reshape(-1) for s in self.scores.values()])


@dataclass
class LayerImportanceProfile:
    layers: np.ndarray
    other: dict[str, float] = field(default_factory=dict)

    def normalized(self) -> np.ndarray:
        s = self.layers.sum()
        if s <= 0:
            raise DegenerateInputError("layer profile has no importance mass")
        return self.layers / s


@dataclass
class DeactivationMask:
    masks: dict[str, np.ndarray]
    mode: str
    fraction: float

    @property
    def count(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def union(self, other: "DeactivationMask") -> "DeactivationMask":
        return DeactivationMask({n: m | other.masks[n] for n, m in self.masks.items()}, "union", self.fraction)


@dataclass
class RankClusterMap:
    density: np.ndarray
    top: np.ndarray
    top_fraction: float
    summary: float


def _probe_batches(probe, modality: str, batch_size: int):
    if not probe:
        raise DegenerateInputError("probe data is empty")
    if isinstance(probe[0], Example):
        return make_batches(probe, modality, batch_size)
    return list(probe)


def estimate_importance(
    model: TransformerLM,
    probe,
    modality: str,
    batch_size: int = 32,
    aggregation: str = "batch_abs",
) -> ImportanceMap:
    """Per-element ``|dL/dθ · θ|`` averaged over probe batches.

    ``batch_abs`` averages the per-batch absolute products; ``abs_of_mean``
    takes the absolute value of the batch-averaged product instead. Models with
    LoRA adapters are scored on their merged weights. ``probe`` is a list of
    examples (batched here, in a fixed order) or of ready ``ModalBatch``es.
    """
    if aggregation not in AGGREGATIONS:
        raise ContractError(f"aggregation must be one of {AGGREGATIONS}")
    batches = _probe_batches(probe, modality, batch_size)
    work = merged_copy(model) if model.lora else model
    flags = {n: p.requires_grad for n, p in work.params.items()}
    acc = {n: np.zeros(p.shape) for n, p in work.params.items()}
    try:
        for p in work.params.values():
            p.requires_grad = True
            p.grad = None
        for batch in batches:
            batch_loss(work, batch).backward()
            for n, p in work.params.items():
                if p.grad is None:
                    continue
                prod = p.grad * p.data
                acc[n] += np.abs(prod) if aggregation == "batch_abs" else prod
                p.grad = None
    finally:
        for n, p in work.params.items():
            p.requires_grad = flags[n]
            p.grad = None
    nb = len(batches)
    scores = {n: (a / nb if aggregation == "batch_abs" else np.abs(a / nb)) for n, a in acc.items()}
    n_ex = sum(b.batch_size for b in batches)
    return ImportanceMap(scores, modality, n_ex, aggregation)


def dataset_loss(model: TransformerLM, batches) -> float:
    """Token-weighted mean masked cross-entropy over all batches."""
    total = 0.0
    count = 0
    with T.no_grad():
        for b in batches:
            n = int(b.loss_mask.sum())
            total += batch_loss(model, b).item() * n
            count += n
    if count == 0:
        raise DegenerateInputError("no scored positions in evaluation data")
    return total / count


def exact_importance(
    model: TransformerLM, probe, modality: str, selection, batch_size: int = 64, budget: int = EXACT_BUDGET
) -> np.ndarray:
    """``|L(θ) - L(θ with element set to 0)|`` for each (name, flat index) in ``selection``."""
    selection = list(selection)
    if len(selection) > budget:
        raise BudgetError(f"exact importance asked for {len(selection)} elements; budget is {budget}")
    batches = _probe_batches(probe, modality, batch_size)
    work = merged_copy(model) if model.lora else model
    base = dataset_loss(work, batches)
    out = np.zeros(len(selection))
    for j, (name, idx) in enumerate(selection):
        flat = work.params[name].data.reshape(-1)
        orig = flat[idx]
        if orig == 0.0:
            continue
        flat[idx] = 0.0
        try:
            out[j] = abs(base - dataset_loss(work, batches))
        finally:
            flat[idx] = orig
    return out


def perplexity(model: TransformerLM, examples, modality: str, batch_size: int = 64) -> float:
    """exp of the mean response-token cross-entropy."""
    batches = _probe_batches(examples, modality, batch_size)
    return float(np.exp(dataset_loss(merged_copy(model) if model.lora else model, batches)))


# -- deactivation ------------------------------------------------------------
def build_mask(imap: ImportanceMap, fraction: float, mode: str, seed: int = 0) -> DeactivationMask:
    """Select ``round(fraction * total)`` elements globally.

    Ties fall to the earlier element in registry order (then flat index).
    """
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"fraction must lie in [0, 1), got {fraction}")
    if mode not in ("top", "bottom", "random"):
        raise ContractError(f"mode must be top, bottom or random, got {mode!r}")
    flat = imap.flat()
    k = int(round(fraction * flat.size))
    if mode == "top":
        chosen = np.argsort(-flat, kind="stable")[:k]
    elif mode == "bottom":
        chosen = np.argsort(flat, kind="stable")[:k]
    else:
        chosen = np.random.default_rng(seed).choice(flat.size, size=k, replace=False)
    sel = np.zeros(flat.size, dtype=bool)
    sel[chosen] = True
    masks = {}
    pos = 0
    for name, s in imap.scores.items():
        masks[name] = sel[pos : pos + s.size].reshape(s.shape)
        pos += s.size
    return DeactivationMask(masks, mode, fraction)


def apply_mask(model: TransformerLM, mask: DeactivationMask) -> TransformerLM:
    """Copy of ``model`` with the masked elements set to zero."""
    if set(mask.masks) != set(model.params):
        raise ContractError("mask names do not match the model's parameter registry")
    out = merged_copy(model)
    for name, m in mask.masks.items():
        p = out.params[name]
        if m.shape != p.shape:
            raise ContractError(f"{name}: mask shape {m.shape} != parameter shape {p.shape}")
        p.data = np.where(m, 0.0, p.data)
    return out


# -- layer aggregation -----------------------------------------------------------
def aggregate_layers(imap: ImportanceMap, n_layers: int | None = None) -> LayerImportanceProfile:
    idx = {n: layer_index(n) for n in imap.scores}
    if n_layers is None:
        n_layers = 1 + max((i for i in idx.values() if i is not None), default=-1)
    layers = np.zeros(n_layers)
    other: dict[str, float] = {}
    for name, s in imap.scores.items():
        total = float(np.abs(s).sum())
        if idx[name] is None:
            other[name] = total
        else:
            layers[idx[name]] += total
    return LayerImportanceProfile(layers, other)


def distribution_shift(before: LayerImportanceProfile, after: LayerImportanceProfile) -> dict:
    """Normalised L1 distance, peak displacement and raw mass ratio (after / before)."""
    if before.layers.shape != after.layers.shape:
        raise ContractError(f"profile lengths differ: {before.layers.size} vs {after.layers.size}")
    p, q = before.normalized(), after.normalized()
    return {
        "l1": float(np.abs(p - q).sum()),
        "peak_moved": int(np.argmax(after.layers) - np.argmax(before.layers)),
        "mass_ratio": float(after.layers.sum() / before.layers.sum()),
    }


# -- clustering maps ---------------------------------------------------------------
def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    return sum(p[1 + di : 1 + di + a.shape[0], 1 + dj : 1 + dj + a.shape[1]] for di in (-1, 0, 1) for dj in (-1, 0, 1))


def vicinity_density(top: np.ndarray) -> np.ndarray:
    """Share of each cell's 3x3 neighbourhood (centre included, clipped at the
    borders) that lies in ``top``."""
    top = np.asarray(top, dtype=np.float64)
    return _box3(top) / _box3(np.ones_like(top))


def rank_cluster_map(scores, matrix_name: str | None = None, top_fraction: float = 0.05) -> RankClusterMap:
    """Top-``top_fraction`` region of a 2-D score matrix and its vicinity density.

    ``scores`` is an :class:`ImportanceMap` (then ``matrix_name`` picks the
    matrix) or a bare 2-D array. ``summary`` is the mean density over Top cells.
    """
    if isinstance(scores, ImportanceMap):
        if matrix_name not in scores.scores:
            raise ContractError(f"no parameter named {matrix_name!r} in the map")
        mat = scores.scores[matrix_name]
    else:
        mat = np.asarray(scores, dtype=np.float64)
    if mat.ndim != 2:
        raise ContractError(f"rank clustering needs a 2-D matrix, got shape {mat.shape}")
    if not 0.0 < top_fraction <= 1.0:
        raise ContractError("top_fraction must lie in (0, 1]")
    k = max(1, int(round(top_fraction * mat.size)))
    top = np.zeros(mat.size, dtype=bool)
    top[np.argsort(-mat.reshape(-1), kind="stable")[:k]] = True
    top = top.reshape(mat.shape)
    density = vicinity_density(top)
    return RankClusterMap(density, top, top_fraction, float(density[top].mean()))


def _state(x) -> dict[str, np.ndarray]:
    if isinstance(x, TransformerLM):
        return merged_copy(x).state_dict() if x.lora else {n: p.data for n, p in x.params.items()}
    return x


def parameter_change_map(theta_before, theta_after, matrix_name: str) -> np.ndarray:
    """``|after - before|`` scaled by its maximum (all zeros when nothing moved)."""
    a = np.asarray(_state(theta_before)[matrix_name])
    b = np.asarray(_state(theta_after)[matrix_name])
    if a.shape != b.shape:
        raise ContractError(f"{matrix_name}: shapes {a.shape} and {b.shape} differ")
    d = np.abs(b - a)
    m = d.max() if d.size else 0.0
    return d / m if m > 0 else np.zeros_like(d)


# -- persistence -------------------------------------------------------------
def importance_bytes(imap: ImportanceMap, cfg: ModelConfig) -> bytes:
    meta = {"modality": imap.modality, "n_examples": imap.n_examples, "aggregation": imap.aggregation}
    return encode_container(KIND_IMPORTANCE, cfg.to_dict(), meta, imap.scores)


def save_importance(imap: ImportanceMap, cfg: ModelConfig, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(importance_bytes(imap, cfg))


def load_importance(path, expect: ModelConfig | None = None) -> ImportanceMap:
    kind, meta, records = read_container(path)
    if kind != KIND_IMPORTANCE:
        raise IntegrityError(f"{path}: expected an importance map, found record kind {kind}")
    if expect is not None and config_hash(meta["config"]) != config_hash(expect):
        raise IntegrityError(f"{path}: importance map was computed for a different model config")
    return ImportanceMap(records, meta["modality"], int(meta["n_examples"]), meta.get("aggregation", "batch_abs"))
