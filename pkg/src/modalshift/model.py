"""Toy decoder-only LM with an encoder-adaptor front end and LoRA adapters.

Weight matrices of the blocks and the adaptor are stored ``[out, in]`` and
applied as ``x @ W.T``; ``lm_head`` is ``[d_model, vocab]`` and applied as
``x @ lm_head``. Canonical parameter names:

    embedding, position, adaptor.0, adaptor.1,
    layer.{i}.{attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down},
    final_norm, lm_head
"""

from __future__ import annotations

import fnmatch
import re
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .batch import ModalBatch
from .errors import ConfigError, LengthError

BLOCK_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
BLOCK_NORMS = ("attn_norm", "mlp_norm")
DEFAULT_LORA_TARGETS = tuple(f"layer.*.{m}" for m in BLOCK_MATRICES)

_LAYER_RE = re.compile(r"^layer\.(\d+)\.")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 32
    feature_dim: int = 64
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def layer_index(name: str) -> int | None:
    """Block index encoded in a canonical name, or None for non-layer groups."""
    m = _LAYER_RE.match(name)
    return int(m.group(1)) if m else None


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (cfg.vocab_size, d),
        "position": (cfg.max_seq, d),
        "adaptor.0": (d, cfg.feature_dim),
        "adaptor.1": (d, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        shapes[p + "attn_norm"] = (d,)
        for m in ("wq", "wk", "wv", "wo"):
            shapes[p + m] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (f, d)
        shapes[p + "w_up"] = (f, d)
        shapes[p + "w_down"] = (d, f)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


@dataclass
class LoraAdapter:
    target: str
    A: T.Tensor  # [r, in]
    B: T.Tensor  # [out, r]
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


class TransformerLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, T.Tensor]):
        self.cfg = cfg
        self.params = params
        self.lora: dict[str, LoraAdapter] = {}

    # -- registry ------------------------------------------------------------
    def named_parameters(self):
        return self.params.items()

    def trainable_parameters(self) -> dict[str, T.Tensor]:
        out = {n: p for n, p in self.params.items() if p.requires_grad}
        for name, ad in self.lora.items():
            out[f"lora.{name}.A"] = ad.A
            out[f"lora.{name}.B"] = ad.B
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ConfigError("state dict names do not match the parameter registry")
        for n, arr in state.items():
            if arr.shape != self.params[n].shape:
                raise ConfigError(f"{n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.ascontiguousarray(arr, dtype=np.float64).copy()

    def zero_grad(self) -> None:
        for p in self.trainable_parameters().values():
            p.grad = None
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "TransformerLM":
        params = {n: T.Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        out = TransformerLM(self.cfg, params)
        for name, ad in self.lora.items():
            out.lora[name] = LoraAdapter(
                name,
                T.Tensor(ad.A.data.copy(), requires_grad=ad.A.requires_grad),
                T.Tensor(ad.B.data.copy(), requires_grad=ad.B.requires_grad),
                ad.rank,
                ad.alpha,
            )
        return out

    def __call__(self, batch: ModalBatch) -> T.Tensor:
        return forward(self, batch)


def init_model(cfg: ModelConfig) -> TransformerLM:
    """Deterministic scaled-normal initialisation from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params: dict[str, T.Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            arr = np.ones(shape)
        elif name in ("embedding", "position"):
            arr = rng.normal(0.0, 1.0, shape)
        elif name == "lm_head":
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
            if name.endswith((".wo", ".w_down")):
                arr *= resid_scale
        params[name] = T.Tensor(arr, requires_grad=True)
    return TransformerLM(cfg, params)


# -- forward ---------------------------------------------------------------------
def _proj(model: TransformerLM, x: T.Tensor, name: str) -> T.Tensor:
    out = T.linear(x, model.params[name])
    ad = model.lora.get(name)
    if ad is not None:
        out = out + T.scale(T.linear(T.linear(x, ad.A), ad.B), ad.scaling)
    return out


def embed_inputs(model: TransformerLM, modality: str, prompt: np.ndarray, tokens: np.ndarray | None) -> T.Tensor:
    """Input embeddings [B, S+R, d]: prompt (tokens or adaptor output) then ``tokens``."""
    p = model.params
    if modality == "text":
        ids = prompt if tokens is None or tokens.shape[1] == 0 else np.concatenate([prompt, tokens], axis=1)
        return T.embedding(p["embedding"], ids)
    feats = T.Tensor(prompt)
    h = T.linear(T.silu(T.linear(feats, p["adaptor.0"])), p["adaptor.1"])
    if tokens is None or tokens.shape[1] == 0:
        return h
    return T.concat([h, T.embedding(p["embedding"], tokens)], axis=1)


def forward_embeddings(model: TransformerLM, x: T.Tensor) -> T.Tensor:
    cfg = model.cfg
    p = model.params
    B, S, d = x.shape
    if S > cfg.max_seq:
        raise LengthError(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    H = cfg.n_heads
    dh = d // H
    x = x + p["position"][:S]
    causal = np.tril(np.ones((S, S), dtype=bool))
    inv = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        a = T.rmsnorm(x) * p[pre + "attn_norm"]
        q = _proj(model, a, pre + "wq").reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = _proj(model, a, pre + "wk").reshape(B, S, H, dh).transpose(0, 2, 3, 1)
        v = _proj(model, a, pre + "wv").reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        att = T.softmax(T.scale(q @ k, inv), mask=causal)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + _proj(model, o, pre + "wo")
        m = T.rmsnorm(x) * p[pre + "mlp_norm"]
        gate = T.silu(_proj(model, m, pre + "w_gate"))
        x = x + _proj(model, gate * _proj(model, m, pre + "w_up"), pre + "w_down")
    x = T.rmsnorm(x) * p["final_norm"]
    return x @ p["lm_head"]


def forward(model: TransformerLM, batch: ModalBatch) -> T.Tensor:
    """Logits [B, S + R, vocab] over prompt followed by the response tokens.

    The logit at position t predicts token t+1, so response token j is scored
    by position ``S - 1 + j``.
    """
    return forward_embeddings(model, embed_inputs(model, batch.modality, batch.prompt, batch.response))


def response_logits(model: TransformerLM, batch: ModalBatch) -> T.Tensor:
    """Logits [B, R, vocab] aligned with ``batch.response``."""
    tokens = batch.response[:, :-1]
    x = embed_inputs(model, batch.modality, batch.prompt, tokens)
    logits = forward_embeddings(model, x)
    S = batch.prompt_len
    return logits[:, S - 1 :]


def batch_loss(model: TransformerLM, batch: ModalBatch) -> T.Tensor:
    return T.cross_entropy(response_logits(model, batch), batch.response, batch.loss_mask)


def generate_greedy(model: TransformerLM, batch: ModalBatch, max_new: int, eos_id: int | None = None) -> list[list[int]]:
    """Greedy decoding from ``batch.prompt``; each row stops at ``eos_id`` (kept)."""
    S = batch.prompt_len
    if S + max_new > model.cfg.max_seq:
        raise LengthError(f"prompt length {S} + max_new {max_new} exceeds max_seq {model.cfg.max_seq}")
    B = batch.batch_size
    out = np.zeros((B, 0), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        for _ in range(max_new):
            logits = forward_embeddings(model, embed_inputs(model, batch.modality, batch.prompt, out))
            nxt = logits.data[:, -1].argmax(axis=-1)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if eos_id is not None:
                done |= nxt == eos_id
                if done.all():
                    break
    rows = []
    for row in out.tolist():
        if eos_id is not None and eos_id in row:
            row = row[: row.index(eos_id) + 1]
        rows.append(row)
    return rows


# -- LoRA --------------------------------------------------------------------
def _match_targets(model: TransformerLM, patterns) -> list[str]:
    if isinstance(patterns, str):
        patterns = (patterns,)
    return [
        n for n in model.params
        if layer_index(n) is not None and model.params[n].ndim == 2 and any(fnmatch.fnmatchcase(n, pat) for pat in patterns)
    ]


def attach_lora(model: TransformerLM, targets=DEFAULT_LORA_TARGETS, r: int = 8, alpha: float | None = None, seed: int | None = None) -> TransformerLM:
    """Attach rank-``r`` adapters (in place) and freeze every base tensor except the adaptor.

    ``alpha`` defaults to ``2 * r``. A is scaled-normal, B is zero, so the
    model's output is unchanged until B moves.
    """
    if r < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {r}")
    names = _match_targets(model, targets)
    if not names:
        raise ConfigError(f"LoRA target pattern {targets!r} matches no block matrix")
    alpha = 2.0 * r if alpha is None else float(alpha)
    rng = np.random.default_rng(model.cfg.seed + 7919 if seed is None else seed)
    for name in names:
        out_dim, in_dim = model.params[name].shape
        A = T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (r, in_dim)), requires_grad=True)
        B = T.Tensor(np.zeros((out_dim, r)), requires_grad=True)
        model.lora[name] = LoraAdapter(name, A, B, r, alpha)
    for name, p in model.params.items():
        p.requires_grad = name.startswith("adaptor.")
    return model


def merge_lora(model: TransformerLM) -> str:
    """Fold adapters into their targets (in place). Returns "merged" or "noop"."""
    if not model.lora:
        warnings.warn("merge_lora: model has no adapters; nothing to merge", stacklevel=2)
        return "noop"
    for name, ad in model.lora.items():
        p = model.params[name]
        p.data = p.data + ad.delta()
    model.lora = {}
    for p in model.params.values():
        p.requires_grad = True
    return "merged"


def merged_copy(model: TransformerLM) -> TransformerLM:
    out = model.copy()
    if out.lora:
        merge_lora(out)
    return out
