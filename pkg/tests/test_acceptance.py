"""Acceptance criteria; each test records one PASS/FAIL line in the terminal summary."""
import gzip
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from nbstage.astgraph import record_graph
from nbstage.autodiff import grad_check
from nbstage.cli import main, read_jsonl
from nbstage.estimator import StageClassifier, split_by_notebook
from nbstage.ingest import CellRecord
from nbstage.model import ModelConfig, collate, forward, init_params, predict_graphs
from nbstage.objectives import (
    LossWeights,
    loss_reconstruction,
    loss_unique_stage,
    loss_unique_topic,
    loss_weak,
    sample_negatives,
    total_loss,
)
from nbstage.analytics import notebook_stage_profile
from nbstage.trainer import Checkpoint, TrainerConfig, train
from nbstage.vocab import EncodedGraph, build_vocabulary, encode_graph
from nbstage.weak_label import Stage, WeakLabel, label_corpus, label_records, subsample_supervision
from synthetic import TOY, random_graph, synthetic_corpus
from test_weak_label import CASES, label_case

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
PUBLIC_CELLS = HERE / "data" / "public_cells.jsonl.gz"
VOCAB = 20


@pytest.fixture(scope="module")
def synthetic():
    records, labels = synthetic_corpus()
    graphs = [record_graph(r, TOY.max_nodes) for r in records]
    vocab = build_vocabulary(graphs, 1)
    return [encode_graph(g, vocab, r.cell_id) for g, r in zip(graphs, records)], labels, vocab


@pytest.fixture(scope="module")
def public_cells():
    with gzip.open(PUBLIC_CELLS, "rt", encoding="utf-8") as fh:
        return [CellRecord.from_json(json.loads(line)) for line in fh]


def test_01_gradient_fidelity(criterion):
    done = criterion(1, "gradient fidelity of the combined loss (toy config, batch 4, 6-node graphs)")
    rng = np.random.default_rng(0)
    params = init_params(TOY, VOCAB, seed=0)
    for p in params.values():
        p.data += rng.normal(scale=0.2, size=p.shape)
    batch = collate([random_graph(rng, 6, VOCAB) for _ in range(4)])
    labels = [WeakLabel(f"g:{i}", s) for i, s in enumerate([Stage.IMPORT, Stage.MODEL, Stage.UNLABELED, Stage.EXPLORE])]
    negatives = sample_negatives(4, 5, rng)

    def objective():
        out = forward(params, batch, TOY)
        return total_loss((
            loss_weak(out.p_stage, labels),
            loss_unique_stage(out.p_stage),
            loss_reconstruction(out.z, out.p_topic, params["R"], negatives),
            loss_unique_topic(params["R"]),
        ), LossWeights())

    start = time.perf_counter()
    worst = grad_check(objective, params.values(), eps=1e-6)
    elapsed = time.perf_counter() - start
    assert done(worst < 1e-3 and elapsed < 30, f"max rel err {worst:.2e} in {elapsed:.1f}s")


def test_02_mask_exactness(criterion):
    done = criterion(2, "attention mask exactness over 100 random graphs")
    rng = np.random.default_rng(1)
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=2, n_topics=4, max_nodes=64)
    params = init_params(cfg, VOCAB, seed=1)
    leaked, worst_row = 0, 0.0
    for _ in range(10):
        graphs = [random_graph(rng, int(rng.integers(1, 40)), VOCAB, density=rng.uniform(0, 0.5)) for _ in range(10)]
        batch = collate(graphs)
        for layer in forward(params, batch, cfg, record_attention=True).attention:
            for weights in layer:
                leaked += int(np.count_nonzero(weights[~batch.mask]))
                worst_row = max(worst_row, float(np.abs(weights.sum(-1) - 1).max()))
    assert done(leaked == 0 and worst_row <= 1e-9, f"{leaked} non-zero non-neighbour weights, max |row sum - 1| {worst_row:.1e}")


def test_03_heuristic_fixtures(criterion):
    done = criterion(3, "heuristic fixture agreement")
    wrong = [c["name"] for c in CASES if label_case(c).stage is not Stage[c["expected"]]]
    assert len(CASES) >= 20
    assert done(not wrong, f"{len(CASES) - len(wrong)}/{len(CASES)} cases agree" + (f"; wrong: {wrong}" if wrong else ""))


def test_04_analytic_loss_values(criterion):
    done = criterion(4, "analytic loss values")
    ln6 = math.log(6)
    uniform = np.full(6, 1 / 6)
    checks = {
        "one-hot entropy": (loss_unique_stage(np.eye(6)[1]).item(), 0.0),
        "uniform entropy": (loss_unique_stage(uniform).item(), ln6),
        "uniform cross-entropy": (loss_weak(uniform, WeakLabel("c:0", Stage.EVALUATE)).item(), ln6),
        "orthonormal topics": (loss_unique_topic(np.eye(8)[:, :4]).item(), 0.0),
        "duplicated topics": (loss_unique_topic(np.array([[0.6, 0.6], [0.8, 0.8]])).item(), math.sqrt(2)),
        "uniform-5 profile entropy": (notebook_stage_profile([0, 1, 2, 3, 4]).entropy, math.log(5)),
    }
    errors = {k: abs(got - want) for k, (got, want) in checks.items()}
    worst = max(errors, key=errors.get)
    assert done(all(e <= 1e-9 for e in errors.values()), f"max abs error {errors[worst]:.1e} ({worst})")


def test_05_overfit_synthetic_corpus(criterion, synthetic):
    done = criterion(5, "overfit 64 synthetic cells with the combined objective (>=95% in 300 epochs, <5 min)")
    encoded, labels, vocab = synthetic
    truth = np.array([int(lab.stage) for lab in labels])
    best = {"accuracy": 0.0, "epoch": 0}

    def on_epoch(epoch, info):
        preds = predict_graphs(info["params"], encoded, TOY)
        acc = float(np.mean([int(p.predicted) for p in preds] == truth))
        if acc > best["accuracy"]:
            best.update(accuracy=acc, epoch=epoch)

    cfg = TrainerConfig(batch_size=16, max_epochs=300, patience=None, learning_rate=0.02)
    start = time.perf_counter()
    train(encoded, labels, encoded, labels, TOY, cfg, vocab, on_epoch=on_epoch)
    elapsed = time.perf_counter() - start
    ok = best["accuracy"] >= 0.95 and elapsed < 300
    assert done(ok, f"best training accuracy {best['accuracy']:.3f} (epoch {best['epoch']}) in {elapsed:.0f}s"), (
        "the default-weighted objective does not overfit the synthetic corpus; see the decisions ledger")


# real-corpus trends ------------------------------------------------------------

TREND_PARAMS = dict(d_model=16, n_heads=2, n_layers=1, n_topics=8, max_nodes=160, batch_size=16,
                    max_epochs=8, patience=3, learning_rate=0.02, min_count=2, validation_fraction=0.1)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trend_data(public_cells):
    labels = label_records(public_cells)
    held = split_by_notebook(public_cells, 0.12, seed=2024)
    test = [(r, lab) for r, lab, h in zip(public_cells, labels, held) if h and lab.covered]
    pool = [(r, lab) for r, lab, h in zip(public_cells, labels, held) if not h]
    return pool, test


def notebook_subset(pool, n_cells, seed):
    """Whole notebooks in a seeded order until ``n_cells`` cells are collected."""
    notebooks = sorted({r.notebook_id for r, _ in pool})
    order = np.random.default_rng(seed).permutation(len(notebooks))
    chosen, count = set(), 0
    sizes = {}
    for r, _ in pool:
        sizes[r.notebook_id] = sizes.get(r.notebook_id, 0) + 1
    for i in order:
        if count >= n_cells:
            break
        chosen.add(notebooks[i])
        count += sizes[notebooks[i]]
    subset = [(r, lab) for r, lab in pool if r.notebook_id in chosen]
    return subset[:n_cells] if len(subset) > n_cells else subset


def held_out_accuracy(pairs, test, seed, keep=1.0):
    """Accuracy on covered held-out cells and the number of distinct stages predicted."""
    records = [r for r, _ in pairs]
    labels = subsample_supervision([lab for _, lab in pairs], keep, seed)
    est = StageClassifier(**TREND_PARAMS, random_state=seed).fit(records, labels)
    test_records = [r for r, _ in test]
    distinct = len({p.predicted for p in est.predict_stages(test_records)[0]})
    return est.score(test_records, [lab for _, lab in test]), distinct


def _summary(runs) -> str:
    accs = [a for a, _ in runs]
    return f"mean {np.mean(accs):.3f} (max {max(d for _, d in runs)} distinct stages predicted)"


def test_06_data_scaling_trend(criterion, trend_data):
    done = criterion(6, "held-out weak-label accuracy, 8k vs 1k training cells (3 seeds, 1-point allowance)")
    pool, test = trend_data
    small = [held_out_accuracy(notebook_subset(pool, 1000, s), test, s) for s in SEEDS]
    large = [held_out_accuracy(notebook_subset(pool, 8000, s), test, s) for s in SEEDS]
    n_large = len(notebook_subset(pool, 8000, 0))
    ok = np.mean([a for a, _ in large]) >= np.mean([a for a, _ in small]) - 0.01
    assert done(ok, f"{n_large} cells {_summary(large)} vs 1k {_summary(small)} on {len(test)} held-out cells")


def test_07_supervision_coverage_trend(criterion, trend_data):
    done = criterion(7, "held-out accuracy with 100% vs 25% of weak labels (3 seeds)")
    pool, test = trend_data
    full = [held_out_accuracy(notebook_subset(pool, 2000, s), test, s, keep=1.0) for s in SEEDS]
    quarter = [held_out_accuracy(notebook_subset(pool, 2000, s), test, s, keep=0.25) for s in SEEDS]
    ok = np.mean([a for a, _ in full]) >= np.mean([a for a, _ in quarter])
    assert done(ok, f"100% {_summary(full)} vs 25% {_summary(quarter)}")


def test_08_determinism_and_persistence(criterion, synthetic, tmp_path):
    done = criterion(8, "bitwise determinism of 10 steps and checkpoint round trip")
    encoded, labels, vocab = synthetic
    cfg = TrainerConfig(batch_size=4, max_epochs=1, patience=None, learning_rate=0.02, seed=11)
    a = train(encoded[:40], labels[:40], encoded[40:], labels[40:], TOY, cfg, vocab)
    b = train(encoded[:40], labels[:40], encoded[40:], labels[40:], TOY, cfg, vocab)
    same_steps = len(a.step_losses) >= 10 and a.step_losses[:10] == b.step_losses[:10]
    path = tmp_path / "toy.ckpt"
    a.checkpoint.save(path)
    loaded = Checkpoint.load(path)
    before = predict_graphs(a.checkpoint.tensors(), encoded[:10], TOY)
    after = predict_graphs(loaded.tensors(), encoded[:10], TOY)
    same_preds = all(np.array_equal(x.p_stage, y.p_stage) for x, y in zip(before, after))
    assert done(same_steps and same_preds, f"10 step losses identical: {same_steps}; 10 predictions identical: {same_preds}")


def _simplex_error(rows) -> float:
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        return 0.0
    return float(max(np.abs(rows.sum(-1) - 1).max(), max(0.0, -rows.min())))


def test_09_pipeline_integrity(criterion, tmp_path, public_cells):
    done = criterion(9, "CLI end to end, simplex outputs, weak-label coverage on a public sample in [0.10, 0.35]")
    c = ["--config", str(FIXTURES / "toy_config.json"), "--seed", "0"]
    t = tmp_path
    steps = [
        ["ingest", "--input", FIXTURES / "notebooks", "--output", t / "cells.jsonl"],
        ["weak-label", "--input", t / "cells.jsonl", "--output", t / "labels.jsonl"],
        ["train", "--cells", t / "cells.jsonl", "--labels", t / "labels.jsonl", "--output", t / "m.ckpt"],
        ["predict", "--checkpoint", t / "m.ckpt", "--cells", t / "cells.jsonl", "--output", t / "pred.jsonl"],
        ["eval", "--predictions", t / "pred.jsonl", "--gold", FIXTURES / "gold.csv", "--output", t / "eval.json"],
        ["analyze", "--predictions", t / "pred.jsonl", "--profiles", t / "prof.csv", "--transitions", t / "tr.json"],
    ]
    codes = [main([str(a) for a in step] + c) for step in steps]

    p_stage = [p["p_stage"] for p in read_jsonl(t / "pred.jsonl")]
    profile_lines = (t / "prof.csv").read_text().splitlines()[2:]
    profiles = [[float(v) for v in line.split(",")[1:6]] for line in profile_lines if line.split(",")[1]]
    transitions = json.loads((t / "tr.json").read_text())
    rows = [r for r, n in zip(transitions["matrix"], transitions["counts"]) if sum(n)]
    simplex = max(_simplex_error(p_stage), _simplex_error(profiles), _simplex_error(rows))

    _, coverage = label_corpus(public_cells)
    ok = codes == [0] * 6 and simplex <= 1e-9 and len(public_cells) >= 10_000 and 0.10 <= coverage <= 0.35
    assert done(ok, f"exit codes {codes}; simplex error {simplex:.1e}; coverage {coverage:.3f} on {len(public_cells)} cells")


def test_10_permutation_equivariance(criterion):
    done = criterion(10, "permutation equivariance of the [CLS] readout on 20 random graphs")
    rng = np.random.default_rng(10)
    params = init_params(TOY, VOCAB, seed=3)
    worst = 0.0
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(3, 30)), VOCAB)
        perm = np.concatenate([[0], 1 + rng.permutation(g.n_nodes - 1)])
        h = EncodedGraph(g.token_ids[perm], g.adjacency_with_self[np.ix_(perm, perm)])
        z1 = forward(params, collate([g]), TOY).z.data[0]
        z2 = forward(params, collate([h]), TOY).z.data[0]
        worst = max(worst, float(np.abs(z1 - z2).max()))
    assert done(worst < 1e-6, f"max |dz| {worst:.1e}")
