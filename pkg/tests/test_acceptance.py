"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (collected in
the terminal summary) before asserting.

Criteria 3 and 6-8 train real toy models and take several minutes.
"""

import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from modalshift import pipeline
from modalshift import tensor as T
from modalshift.batch import ModalBatch
from modalshift.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from modalshift.cli import main
from modalshift.config import default_config, load_config
from modalshift.data import TaskSpec, World, generate_corpus, make_batches
from modalshift.importance import (
    ImportanceMap,
    estimate_importance,
    exact_importance,
    importance_bytes,
    load_importance,
    save_importance,
)
from modalshift.model import ModelConfig, attach_lora, batch_loss, forward, init_model, merged_copy
from modalshift.report import deactivation_report, parse_pgm, pgm_bytes
from modalshift.training import TrainingPlan, layer_lr_coefficients, train
from oracles import central_difference, max_relative_error, spearman

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2, 3, 4)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- 1 -------------------------------------------------------------------------------
def _primitive_errors(rng) -> dict[str, float]:
    mask = np.tril(np.ones((4, 4), dtype=bool))
    targets = rng.integers(0, 6, size=(2, 4))
    cases = {
        "matmul": (T.matmul, [(3, 4), (4, 5)]),
        "linear": (T.linear, [(2, 3, 4), (5, 4)]),
        "add": (T.add, [(3, 4), (4,)]),
        "mul": (T.mul, [(2, 1, 4), (3, 1)]),
        "silu": (T.silu, [(3, 5)]),
        "softmax": (lambda x: T.softmax(x, mask=mask), [(2, 4, 4)]),
        "rmsnorm": (T.rmsnorm, [(3, 6)]),
        "cross_entropy": (lambda x: T.cross_entropy(x, targets), [(2, 4, 6)]),
    }
    errs = {}
    for name, (fn, shapes) in cases.items():
        xs = [rng.normal(size=s) for s in shapes]
        leaves = [T.Tensor(x, requires_grad=True) for x in xs]
        out = fn(*leaves)
        w = rng.normal(size=out.shape)
        T.backward((out * w).sum())
        worst = 0.0
        for leaf, x in zip(leaves, xs):
            num = central_difference(lambda: float((fn(*[T.Tensor(v) for v in xs]).data * w).sum()), x)
            worst = max(worst, max_relative_error(leaf.grad, num))
        errs[name] = worst
    return errs


def _random_config_error(rng, k: int) -> float:
    heads = int(rng.choice([1, 2]))
    cfg = ModelConfig(
        vocab_size=int(rng.integers(9, 20)),
        d_model=heads * int(rng.choice([2, 4])),
        n_layers=int(rng.integers(1, 4)),
        n_heads=heads,
        d_ff=int(rng.choice([4, 8, 12])),
        max_seq=10,
        feature_dim=int(rng.integers(2, 6)),
        seed=k,
    )
    model = init_model(cfg)
    if k % 3 == 2:
        attach_lora(model, r=int(rng.integers(1, 3)), seed=k)
        for ad in model.lora.values():
            ad.B.data = rng.normal(0, 0.3, ad.B.shape)
    S, R = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if k % 2:
        prompt = rng.normal(size=(2, S, cfg.feature_dim))
        batch = ModalBatch("speech", prompt, rng.integers(0, cfg.vocab_size, (2, R)))
    else:
        batch = ModalBatch("text", rng.integers(0, cfg.vocab_size, (2, S)), rng.integers(0, cfg.vocab_size, (2, R)))
    params = model.trainable_parameters()
    batch_loss(model, batch).backward()
    worst = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        idx = rng.choice(p.size, size=min(5, p.size), replace=False)

        def f():
            with T.no_grad():
                return batch_loss(model, batch).item()

        num = central_difference(f, p.data, indices=idx).reshape(-1)[idx]
        worst = max(worst, max_relative_error(p.grad.reshape(-1)[idx], num))
    return worst


def test_criterion_1_gradient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    prim = _primitive_errors(rng)
    model_errs = [_random_config_error(rng, k) for k in range(24)]
    secs = time.time() - t0
    ok = max(prim.values()) <= 1e-6 and max(model_errs) <= 1e-4 and secs <= 60
    record(
        1,
        ok,
        f"24 random configs: max rel err {max(model_errs):.2e} (<= 1e-4); "
        f"primitives: max {max(prim.values()):.2e} (<= 1e-6); {secs:.1f}s",
    )
    assert ok


# -- 2 ---------------------------------------------------------------------------------
def test_criterion_2_estimate_tracks_exact_importance():
    t0 = time.time()
    V = 32
    cfg = ModelConfig(vocab_size=V, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=12, feature_dim=8, seed=0)
    corpus = generate_corpus(TaskSpec("toy-qa", V, 300, 50, 3, 0.1, 8), World.build(V, 8, 0))
    model = train(init_model(cfg), corpus.train, TrainingPlan("pretrain-text", base_lr=3e-3, epochs=3)).model
    # one batch holds the whole probe, so the estimate and the exact loss see the same data
    probe = make_batches(corpus.train[:128], "text", 128)
    imap = estimate_importance(model, probe, "text")
    rng = np.random.default_rng(0)
    universe = [(n, i) for n, p in model.params.items() for i in range(p.size)]
    selection = [universe[k] for k in rng.choice(len(universe), 600, replace=False)]
    exact = exact_importance(model, probe, "text", selection)
    est = np.array([imap.scores[n].reshape(-1)[i] for n, i in selection])
    rho = spearman(exact, est)
    secs = time.time() - t0
    ok = model.n_params() <= 50_000 and rho >= 0.8 and secs <= 600
    record(2, ok, f"Spearman {rho:.3f} over 600 elements (>= 0.8), {model.n_params()} params, {secs:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------
def _row_ok(row) -> bool:
    return bool(row["top_ok"] and row["bottom_ok"] and row["random_ok"])


def _fmt_row(row) -> str:
    return f"{row['modality']} base {row['base']:.3f} top {row['top']:.1f} bottom {row['bottom']:.3f} random {row['random']:.3f}"


@pytest.mark.slow
def test_criterion_3_deactivation_ordering():
    t0 = time.time()
    rc = default_config()
    data = pipeline.build_data(rc)
    pre = pipeline.pretrain_model(rc, data).model
    aligned = pipeline.align_model(rc, pre, data).model
    prov = rc.provenance()
    text_only = deactivation_report(
        pre, {"text": estimate_importance(pre, data.probe, "text")}, data.pretrain_eval, prov, rc.fraction, modalities=("text",)
    )
    maps = {m: estimate_importance(aligned, data.probe, m) for m in ("text", "speech")}
    adapted = deactivation_report(aligned, maps, data.pretrain_eval, prov, rc.fraction)
    secs = time.time() - t0
    rows = text_only.payload["rows"] + adapted.payload["rows"]
    ok = all(_row_ok(r) for r in rows) and secs <= 900
    detail = "; ".join(
        [f"pretrained {_fmt_row(text_only.payload['rows'][0])}"] + [f"speech-adapted {_fmt_row(r)}" for r in adapted.payload["rows"]]
    )
    record(3, ok, f"{detail}; {secs:.0f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------------------------
def test_criterion_4_layer_lr_rule():
    exact = layer_lr_coefficients(np.array([10.0, 30.0, 20.0]), 0.4).multipliers.tolist() == [1.0, 0.6, 0.8]
    rng = np.random.default_rng(4)
    good = 0
    for _ in range(100):
        prof = rng.random(int(rng.integers(2, 16))) * 10 ** rng.uniform(-3, 3)
        lam = float(rng.uniform(0, 0.99))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = layer_lr_coefficients(prof, lam).multipliers
        order = np.argsort(prof)
        good += bool(
            np.all(m <= 1.0) and np.all(m >= 1 - lam - 1e-12) and np.all(np.diff(m[order]) <= 1e-12)
            and m[order[0]] == 1.0 and abs(m[order[-1]] - (1 - lam)) <= 1e-12
        )
    ok = exact and good == 100
    record(4, ok, f"[10,30,20] -> [1.0,0.6,0.8] exact: {exact}; invariants on {good}/100 random profiles")
    assert ok


# -- 5 ---------------------------------------------------------------------------------------------
def test_criterion_5_lora_invariants():
    V = 32
    cfg = ModelConfig(vocab_size=V, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=12, feature_dim=8, seed=1)
    corpus = generate_corpus(TaskSpec("copy", V, 128, 16, 3, 0.1, 8), World.build(V, 8, 1))
    base = init_model(cfg)
    batch = make_batches(corpus.eval, "speech", 16)[0]
    ref = forward(base, batch).data
    wrapped = attach_lora(base.copy(), r=3)
    identity = np.array_equal(forward(wrapped, batch).data, ref)
    r = 3
    tuned = train(base, corpus.train, TrainingPlan("lora", base_lr=1e-2, epochs=3, lora_rank=r)).model
    fidelity = float(np.abs(forward(tuned, batch).data - forward(merged_copy(tuned), batch).data).max())
    frozen = all(
        np.array_equal(tuned.params[n].data, p.data) for n, p in base.params.items() if not n.startswith("adaptor.")
    )
    ranks = max(np.linalg.matrix_rank(ad.delta()) for ad in tuned.lora.values())
    ok = identity and fidelity <= 1e-10 and frozen and ranks <= r
    record(
        5,
        ok,
        f"attach identity exact: {identity}; merge max |diff| {fidelity:.1e} (<= 1e-10); "
        f"frozen base bit-equal: {frozen}; max rank dW {ranks} (<= {r})",
    )
    assert ok


# -- 6, 7, 8 ----------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def five_seed_grid():
    base = load_config(ROOT / "configs" / "small.json")
    t0 = time.time()
    rows = []
    for s in SEEDS:
        rc = replace(base, seed=s).resolved().validate()
        data = pipeline.build_data(rc)
        pre = pipeline.pretrain_model(rc, data).model
        grid = pipeline.run_grid(rc, pre, data, arms=rc.arms)
        assert not grid.failures, grid.failures
        rows += grid.rows
    return rows, time.time() - t0


def _mean(rows, arm, key):
    return float(np.mean([r[key] for r in rows if r["arm"] == arm]))


@pytest.mark.slow
def test_criterion_6_forgetting_ordering(five_seed_grid):
    rows, secs = five_seed_grid
    t2t0 = _mean(rows, "no-ft", "t2t")
    drop = {a: t2t0 - _mean(rows, a, "t2t") for a in ("full-ft", "layer-lr", "lora-r8")}
    s2t = {a: _mean(rows, a, "s2t") for a in ("full-ft", "layer-lr", "lora-r8")}
    ok = (
        drop["full-ft"] >= drop["layer-lr"]
        and drop["full-ft"] >= drop["lora-r8"]
        and s2t["layer-lr"] >= s2t["full-ft"] - 0.02
        and s2t["lora-r8"] >= s2t["full-ft"] - 0.02
        and secs <= 3600
    )
    record(
        6,
        ok,
        "mean T2T drop full-ft {full-ft:.3f} layer-lr {layer-lr:.3f} lora {lora-r8:.3f}; ".format(**drop)
        + "mean S2T full-ft {full-ft:.3f} layer-lr {layer-lr:.3f} lora {lora-r8:.3f}; ".format(**s2t)
        + f"{len(SEEDS)} seeds in {secs:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_distribution_shift(five_seed_grid):
    rows, _ = five_seed_grid
    shift = {a: _mean(rows, a, "shift_l1") for a in ("full-ft", "layer-lr", "lora-r8")}
    ok = shift["full-ft"] > shift["layer-lr"] and shift["full-ft"] > shift["lora-r8"]
    record(7, ok, "mean normalized-L1 shift full-ft {full-ft:.4f} layer-lr {layer-lr:.4f} lora {lora-r8:.4f}".format(**shift))
    assert ok


@pytest.mark.slow
def test_criterion_8_rank_clustering(five_seed_grid):
    rows, _ = five_seed_grid
    full, lora = _mean(rows, "full-ft", "cluster_summary"), _mean(rows, "lora-r8", "cluster_summary")
    per_seed = sum(
        r["cluster_summary"] > f["cluster_summary"]
        for r in rows
        if r["arm"] == "lora-r8"
        for f in rows
        if f["arm"] == "full-ft" and f["seed"] == r["seed"]
    )
    ok = lora > full
    record(8, ok, f"mean change-map cluster summary lora {lora:.4f} > full-ft {full:.4f} (higher on {per_seed}/{len(SEEDS)} seeds)")
    assert ok


# -- 9 ----------------------------------------------------------------------------------------------------
def _all_commands(root: Path, seed: str) -> list[int]:
    smoke = str(ROOT / "configs" / "smoke.json")
    common = ["--config", smoke, "--out", str(root), "--seed", seed]
    return [
        main(["pretrain", *common]),
        main(["importance", *common]),
        main(["deactivate", *common]),
        main(["rank-cluster", *common]),
        main(["grid", *common]),
        main(["report", *common]),
    ]


def test_criterion_9_reproducibility(tmp_path):
    codes = []
    for seed in ("0", "3"):
        codes += _all_commands(tmp_path / "a", seed) + _all_commands(tmp_path / "b", seed)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.suffix in (".csv", ".pgm"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.suffix in (".csv", ".pgm"))
    same = files_a == files_b and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)
    ok = same and not any(codes) and len(files_a) > 20
    record(9, ok, f"{len(files_a)} CSV/PGM files from all six commands at two seeds byte-identical on rerun: {same}")
    assert ok


# -- 10 ----------------------------------------------------------------------------------------------------
def test_criterion_10_round_trips(tmp_path):
    model = init_model(ModelConfig())
    h1 = save_checkpoint(model, tmp_path / "a.ckpt")
    h2 = save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    lora = attach_lora(init_model(ModelConfig()), r=4)
    for ad in lora.lora.values():
        ad.B.data = np.random.default_rng(0).normal(size=ad.B.shape)
    save_checkpoint(lora, tmp_path / "l.ckpt")
    lora_same = checkpoint_bytes(load_checkpoint(tmp_path / "l.ckpt")) == checkpoint_bytes(lora)
    rng = np.random.default_rng(10)
    imap = ImportanceMap({n: np.abs(rng.normal(size=p.shape)) for n, p in model.params.items()}, "text", 64)
    save_importance(imap, model.cfg, tmp_path / "m.msim")
    map_same = importance_bytes(load_importance(tmp_path / "m.msim"), model.cfg) == (tmp_path / "m.msim").read_bytes()
    mat = rng.random((37, 53))
    pgm_err = float(np.abs(parse_pgm(pgm_bytes(mat)) - mat).max())
    ok = h1 == h2 and lora_same and map_same and pgm_err <= 0.5 / 65535
    record(
        10,
        ok,
        f"checkpoint bit-identical: {h1 == h2}; LoRA checkpoint: {lora_same}; importance map: {map_same}; "
        f"PGM max err {pgm_err:.2e} (<= {0.5 / 65535:.2e})",
    )
    assert ok
