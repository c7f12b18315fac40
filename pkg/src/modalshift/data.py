"""Synthetic paired text/speech corpora.

Every example exists twice: as a token prompt and as a "speech" prompt whose
positions are feature vectors. A speech frame is the token's row of a fixed
random codebook plus Gaussian jitter, so both renditions carry the same content
while living in different input distributions. Responses are always tokens.

Token layout: 0 PAD, 1 BOS, 2 EOS, 3 SEP, 4..7 task markers, 8.. content.

Task kinds:
  toy-qa        [QA t1..tL SEP] -> [f(t1)..f(tL) EOS], f a fixed random permutation
  copy          [COPY t1..tL SEP] -> [t1..tL EOS]
  kv-retrieval  [KV k] -> [v EOS] over a fixed random key/value table
  markov-text   [LM x1..xL] -> [x(L+1)..x(2L) EOS], a walk on a fixed random
                chain with ``MARKOV_FANOUT`` successors per token; the only task
                with irreducible entropy
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .batch import ModalBatch
from .errors import ConfigError, DegenerateInputError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
TASK_MARKERS = {"toy-qa": 4, "copy": 5, "kv-retrieval": 6, "markov-text": 7}
MARKOV_FANOUT = 4
FIRST_CONTENT = 8
TASK_KINDS = tuple(TASK_MARKERS)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "toy-qa"
    vocab_size: int = 256
    n_train: int = 2000
    n_eval: int = 200
    seq_len: int = 4
    noise_std: float = 0.1
    feature_dim: int = 64
    seed: int = 0
    world_seed: int = 0

    def validate(self) -> "TaskSpec":
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        n_content = self.vocab_size - FIRST_CONTENT
        if n_content < 2:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves fewer than 2 content tokens")
        if self.n_train < 0 or self.n_eval < 0 or self.seq_len < 1:
            raise ConfigError("n_train, n_eval must be >= 0 and seq_len >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        total = self.n_train + self.n_eval
        if self.kind == "kv-retrieval":
            if total > n_content:
                raise ConfigError(f"kv-retrieval needs {total} distinct keys but vocab has {n_content} content tokens")
        elif self.kind == "markov-text" and total > n_content * min(MARKOV_FANOUT, n_content) ** (self.seq_len - 1) // 2:
            raise ConfigError(f"markov-text: {total} distinct walks do not fit in vocab {self.vocab_size} at length {self.seq_len}")
        elif total > n_content**self.seq_len // 2:
            raise ConfigError(f"{self.kind}: {total} distinct prompts do not fit in vocab {self.vocab_size} at length {self.seq_len}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    """Fixed structure shared by every task built from the same world seed."""

    vocab_size: int
    feature_dim: int
    codebook: np.ndarray  # [vocab, feature_dim]
    qa_map: np.ndarray  # [vocab] token -> answer token (identity outside content)
    kv_keys: np.ndarray
    kv_values: np.ndarray
    chain_next: np.ndarray  # [vocab, fanout] successor tokens
    chain_prob: np.ndarray  # [vocab, fanout] transition probabilities

    @classmethod
    def build(cls, vocab_size: int, feature_dim: int, seed: int) -> "World":
        rng = np.random.default_rng([seed, 0xC0DE])
        codebook = rng.normal(0.0, 1.0, (vocab_size, feature_dim))
        content = np.arange(FIRST_CONTENT, vocab_size)
        qa_map = np.arange(vocab_size)
        qa_map[content] = rng.permutation(content)
        keys = rng.permutation(content)
        values = rng.choice(content, size=keys.size)
        fan = min(MARKOV_FANOUT, content.size)
        nxt = np.stack([rng.choice(content, size=fan, replace=False) for _ in range(vocab_size)])
        prob = rng.dirichlet(np.ones(fan), size=vocab_size)
        return cls(vocab_size, feature_dim, codebook, qa_map, keys, values, nxt, prob)

    def walk(self, start: int, steps: int, rng: np.random.Generator) -> np.ndarray:
        out = [start]
        for _ in range(steps - 1):
            t = out[-1]
            out.append(int(self.chain_next[t, rng.choice(self.chain_next.shape[1], p=self.chain_prob[t])]))
        return np.array(out)


@dataclass
class Example:
    id: int
    task: str
    text_prompt: np.ndarray
    speech_prompt: np.ndarray
    response: np.ndarray

    def prompt(self, modality: str) -> np.ndarray:
        return self.text_prompt if modality == "text" else self.speech_prompt


@dataclass
class Corpus:
    spec: TaskSpec
    train: list[Example] = field(default_factory=list)
    eval: list[Example] = field(default_factory=list)


def render_speech(tokens: np.ndarray, codebook: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    feats = codebook[tokens]
    if noise_std > 0:
        feats = feats + rng.normal(0.0, noise_std, feats.shape)
    return feats


def prompt_hash(tokens) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()


def _sample_prompts(spec: TaskSpec, world: World, rng: np.random.Generator):
    """Yield (prompt, response) pairs with distinct prompts, train first."""
    total = spec.n_train + spec.n_eval
    marker = TASK_MARKERS[spec.kind]
    if spec.kind == "kv-retrieval":
        for k, v in zip(world.kv_keys[:total], world.kv_values[:total]):
            yield np.array([marker, k]), np.array([v, EOS])
        return
    seen: set[bytes] = set()
    hi = spec.vocab_size
    L = spec.seq_len
    while len(seen) < total:
        if spec.kind == "markov-text":
            walk = world.walk(int(rng.integers(FIRST_CONTENT, hi)), 2 * L, rng)
            body, answer = walk[:L], walk[L:]
        else:
            body = rng.integers(FIRST_CONTENT, hi, size=L)
            answer = world.qa_map[body] if spec.kind == "toy-qa" else body
        key = body.tobytes()
        if key in seen:
            continue
        seen.add(key)
        if spec.kind == "markov-text":
            yield np.concatenate([[marker], body]), np.concatenate([answer, [EOS]])
        else:
            yield np.concatenate([[marker], body, [SEP]]), np.concatenate([answer, [EOS]])


def generate_corpus(spec: TaskSpec, world: World | None = None) -> Corpus:
    """Deterministic paired corpus; eval prompts never occur in train."""
    spec.validate()
    if world is None:
        world = World.build(spec.vocab_size, spec.feature_dim, spec.world_seed)
    rng = np.random.default_rng([spec.seed, TASK_MARKERS[spec.kind]])
    noise_rng = np.random.default_rng([spec.seed, TASK_MARKERS[spec.kind], 1])
    examples = []
    for i, (prompt, response) in enumerate(_sample_prompts(spec, world, rng)):
        speech = render_speech(prompt, world.codebook, spec.noise_std, noise_rng)
        examples.append(Example(i, spec.kind, prompt.astype(np.int64), speech, response.astype(np.int64)))
    return Corpus(spec, examples[: spec.n_train], examples[spec.n_train :])


def merge_examples(*groups: list[Example]) -> list[Example]:
    """Concatenate example lists, renumbering ids so they stay unique."""
    out = []
    for group in groups:
        for ex in group:
            out.append(replace(ex, id=len(out)))
    return out


def subsample(examples: list[Example], ratio: float, seed: int) -> list[Example]:
    """Deterministic ``ratio`` subset (at least one example), original order kept."""
    if not examples:
        raise DegenerateInputError("cannot subsample an empty example list")
    n = max(1, int(round(len(examples) * ratio)))
    idx = np.sort(np.random.default_rng(seed).choice(len(examples), size=n, replace=False))
    return [examples[i] for i in idx]


def make_batches(
    examples: list[Example], modality: str, batch_size: int, rng: np.random.Generator | None = None
) -> list[ModalBatch]:
    """Batches of same-shaped examples. With ``rng`` the order is shuffled
    (both within and across shape groups); otherwise it is stable."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    groups: dict[tuple, list[Example]] = {}
    for ex in examples:
        groups.setdefault((ex.text_prompt.shape[0], ex.response.shape[0]), []).append(ex)
    batches = []
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members)) if rng is not None else np.arange(len(members))
        for s in range(0, len(members), batch_size):
            chunk = [members[i] for i in order[s : s + batch_size]]
            batches.append(
                ModalBatch(
                    modality,
                    np.stack([ex.prompt(modality) for ex in chunk]),
                    np.stack([ex.response for ex in chunk]),
                    ids=[ex.id for ex in chunk],
                )
            )
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def answer_accuracy(model, examples: list[Example], modality: str, batch_size: int = 64, generate=None) -> float:
    """Exact-match rate of greedy answers against gold responses."""
    if not examples:
        raise DegenerateInputError("answer_accuracy: empty eval set")
    if generate is None:
        from .model import generate_greedy as generate
    gold = {ex.id: ex.response.tolist() for ex in examples}
    hits = 0
    for batch in make_batches(examples, modality, batch_size):
        outs = generate(model, batch, batch.response_len, eos_id=EOS)
        hits += sum(out == gold[i] for i, out in zip(batch.ids, outs))
    return hits / len(examples)


# -- line-delimited export ---------------------------------------------------
def _fixed(arr: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(f"{v:.8f}" for v in row) + "]" for row in arr) + "]"


def export_corpus(corpus: Corpus, path) -> None:
    """One JSON record per (example, modality); floats in fixed 8-decimal form."""
    with open(path, "w") as fh:
        for split, exs in (("train", corpus.train), ("eval", corpus.eval)):
            for ex in exs:
                for modality in ("text", "speech"):
                    head = {
                        "id": ex.id,
                        "split": split,
                        "task": ex.task,
                        "modality": modality,
                        "response": ex.response.tolist(),
                    }
                    if modality == "text":
                        head["prompt"] = ex.text_prompt.tolist()
                        fh.write(json.dumps(head, sort_keys=True) + "\n")
                    else:
                        line = json.dumps(dict(head, features="@"), sort_keys=True)
                        fh.write(line.replace('"@"', _fixed(ex.speech_prompt)) + "\n")


def import_corpus(path, spec: TaskSpec) -> Corpus:
    rows: dict[tuple[str, int], dict] = {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        rows.setdefault((rec["split"], rec["id"]), {}).update(rec)
    corpus = Corpus(spec)
    for (split, i), rec in sorted(rows.items(), key=lambda kv: (kv[0][0] != "train", kv[0][1])):
        ex = Example(
            i,
            rec["task"],
            np.array(rec["prompt"], dtype=np.int64),
            np.array(rec["features"], dtype=np.float64),
            np.array(rec["response"], dtype=np.int64),
        )
        (corpus.train if split == "train" else corpus.eval).append(ex)
    return corpus
