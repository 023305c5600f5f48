import dataclasses
import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbstage import trainer as trainer_module
from nbstage.astgraph import record_graph
from nbstage.model import predict_graphs
from nbstage.objectives import LossWeights
from nbstage.trainer import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    EarlyStopping,
    TrainerConfig,
    TrainingError,
    VocabularyMismatch,
    _batches,
    train,
)
from nbstage.vocab import build_vocabulary, encode_graph
from synthetic import TOY, synthetic_corpus


@pytest.fixture(scope="module")
def corpus():
    records, labels = synthetic_corpus()
    graphs = [record_graph(r, TOY.max_nodes) for r in records]
    vocab = build_vocabulary(graphs, 1)
    encoded = [encode_graph(g, vocab, r.cell_id) for g, r in zip(graphs, records)]
    return encoded, labels, vocab


@pytest.fixture(scope="module")
def trained(corpus):
    encoded, labels, vocab = corpus
    cfg = TrainerConfig(batch_size=8, max_epochs=3, patience=None, learning_rate=0.02)
    return train(encoded[:48], labels[:48], encoded[48:], labels[48:], TOY, cfg, vocab)


class TestConfig:
    def test_defaults(self):
        cfg = TrainerConfig()
        assert (cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.learning_rate, cfg.momentum, cfg.n_negatives) == (
            16, 8, 3, 1e-5, 0.9, 5)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(patience=9), dict(learning_rate=0), dict(float_width=16)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainerConfig(**kw)


class TestEarlyStopping:
    def test_example_sequence(self):
        stopper = EarlyStopping(3)
        decisions = [stopper.update(v) for v in [1.0, 0.9, 0.91, 0.92, 0.93]]
        assert decisions == [False, False, False, False, True]
        assert stopper.best_epoch == 2

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 5))
    def test_best_never_worse_than_earlier(self, losses, patience):
        stopper = EarlyStopping(patience)
        seen = []
        for loss in losses:
            seen.append(loss)
            stop = stopper.update(loss)
            assert stopper.best == min(seen)
            assert seen[stopper.best_epoch - 1] == stopper.best
            if stop:
                assert len(seen) - stopper.best_epoch == patience
                break

    def test_train_returns_best_epoch(self, corpus, monkeypatch):
        encoded, labels, vocab = corpus
        sequence = iter([1.0, 0.9, 0.91, 0.92, 0.93, 0.5])
        monkeypatch.setattr(trainer_module, "evaluate_loss", lambda *a, **k: next(sequence))
        snapshots = {}

        def on_epoch(epoch, info):
            snapshots[epoch] = {k: p.data.copy() for k, p in info["params"].items()}

        cfg = TrainerConfig(batch_size=16, max_epochs=8, patience=3, learning_rate=0.01)
        result = train(encoded, labels, encoded, labels, TOY, cfg, vocab, on_epoch=on_epoch)
        assert result.epochs_run == 5 and result.best_epoch == 2
        assert result.validation_losses == [1.0, 0.9, 0.91, 0.92, 0.93]
        assert all(np.array_equal(result.checkpoint.params[k], snapshots[2][k]) for k in snapshots[2])
        assert result.checkpoint.step == 2 * 4


@settings(max_examples=50)
@given(st.integers(1, 70), st.integers(1, 20), st.integers(0, 100))
def test_batches_partition_epoch(n, batch_size, seed):
    order = np.random.default_rng(seed).permutation(n)
    batches = list(_batches(n, batch_size, order))
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    assert all(len(b) == batch_size for b in batches[:-1]) and 1 <= len(batches[-1]) <= batch_size


class TestTraining:
    def test_empty_training_set(self, corpus):
        _, _, vocab = corpus
        with pytest.raises(TrainingError):
            train([], [], [], [], TOY, TrainerConfig(), vocab)

    def test_deterministic_first_ten_steps(self, corpus):
        encoded, labels, vocab = corpus
        cfg = TrainerConfig(batch_size=8, max_epochs=2, patience=None, learning_rate=0.02, seed=5)
        a = train(encoded, labels, encoded[:8], labels[:8], TOY, cfg, vocab)
        b = train(encoded, labels, encoded[:8], labels[:8], TOY, cfg, vocab)
        assert len(a.step_losses) >= 10 and a.step_losses[:10] == b.step_losses[:10]
        assert a.step_losses == b.step_losses

    def test_seed_changes_trajectory(self, corpus):
        encoded, labels, vocab = corpus
        runs = [train(encoded, labels, encoded[:8], labels[:8], TOY,
                      TrainerConfig(batch_size=8, max_epochs=1, patience=None, learning_rate=0.02, seed=s), vocab)
                for s in (0, 1)]
        assert runs[0].step_losses != runs[1].step_losses

    def test_log_records(self, corpus):
        encoded, labels, vocab = corpus
        logged = []
        cfg = TrainerConfig(batch_size=16, max_epochs=1, patience=None, learning_rate=0.02)
        train(encoded, labels, encoded[:8], labels[:8], TOY, cfg, vocab, log=logged.append)
        assert len(logged) == 4 and [r["step"] for r in logged] == [1, 2, 3, 4]
        assert set(logged[0]) == {"step", "L", "L_ws", "L_us", "L_rec", "L_ut"}
        w = cfg.weights
        for r in logged:
            assert r["L"] == w.weak * r["L_ws"] + w.unique_stage * r["L_us"] + w.reconstruction * r["L_rec"] + w.unique_topic * r["L_ut"]

    def test_non_finite_loss_names_step(self, corpus, monkeypatch):
        encoded, labels, vocab = corpus
        original = trainer_module.batch_objective
        calls = []

        def poisoned(*args, **kwargs):
            loss, report = original(*args, **kwargs)
            calls.append(1)
            if len(calls) == 3:
                report = dataclasses.replace(report, total=float("nan"))
            return loss, report

        monkeypatch.setattr(trainer_module, "batch_objective", poisoned)
        cfg = TrainerConfig(batch_size=8, max_epochs=1, patience=None, learning_rate=0.02)
        with pytest.raises(TrainingError, match="step 3"):
            train(encoded, labels, encoded[:8], labels[:8], TOY, cfg, vocab)

    def test_weak_supervision_alone_overfits(self, corpus):
        encoded, labels, vocab = corpus
        cfg = TrainerConfig(batch_size=16, max_epochs=300, patience=None, learning_rate=0.02,
                            weights=LossWeights(1.0, 0.0, 0.0, 0.0))
        result = train(encoded, labels, encoded, labels, TOY, cfg, vocab)
        preds = predict_graphs(result.checkpoint.tensors(), encoded, TOY)
        accuracy = np.mean([p.predicted is lab.stage for p, lab in zip(preds, labels)])
        assert accuracy >= 0.95


class TestFirewall:
    @pytest.mark.parametrize("bad", [
        lambda lab: int(lab.stage),
        lambda lab: lab.stage.name,
        lambda lab: {"cell_id": lab.cell_id, "stage": lab.stage.name},
        lambda lab: (lab.cell_id, lab.stage.name),
    ])
    def test_only_weak_labels(self, corpus, bad):
        encoded, labels, vocab = corpus
        with pytest.raises(TypeError, match="WeakLabel"):
            train(encoded[:8], [bad(lab) for lab in labels[:8]], encoded[:8], labels[:8],
                  TOY, TrainerConfig(max_epochs=1, patience=None), vocab)

    def test_validation_labels_checked_too(self, corpus):
        encoded, labels, vocab = corpus
        with pytest.raises(TypeError):
            train(encoded[:8], labels[:8], encoded[:2], ["MODEL", "EXPLORE"],
                  TOY, TrainerConfig(max_epochs=1, patience=None), vocab)

    def test_length_mismatch(self, corpus):
        encoded, labels, vocab = corpus
        with pytest.raises(ValueError):
            train(encoded[:8], labels[:7], encoded[:8], labels[:8], TOY, TrainerConfig(), vocab)


def read_checkpoint_by_hand(blob: bytes):
    """Independent little-endian reader for the container layout."""
    assert blob[:8] == CHECKPOINT_MAGIC
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    pos = 20
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        name = blob[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 4)
        pos += 4 + 8 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(blob, "<f8", size, pos).reshape(shape)
        pos += 8 * size
    assert blob[pos:] == hashlib.sha256(blob[:pos]).digest()
    return version, header, tensors


class TestCheckpoint:
    def test_layout(self, trained):
        blob = trained.checkpoint.to_bytes()
        version, header, tensors = read_checkpoint_by_hand(blob)
        assert version == 1 and header["model_config"]["d_model"] == 8
        assert np.array_equal(tensors["param/W_stage"], trained.checkpoint.params["W_stage"])

    def test_round_trip_bytes_and_predictions(self, trained, corpus, tmp_path):
        encoded, _, _ = corpus
        path = tmp_path / "model.ckpt"
        trained.checkpoint.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.to_bytes() == path.read_bytes()
        assert all(np.array_equal(loaded.params[k], v) for k, v in trained.checkpoint.params.items())
        before = predict_graphs(trained.checkpoint.tensors(), encoded[:10], TOY)
        after = predict_graphs(loaded.tensors(), encoded[:10], TOY)
        assert all(np.array_equal(a.p_stage, b.p_stage) for a, b in zip(before, after))

    def test_meta_round_trip(self, trained):
        ckpt = dataclasses.replace(trained.checkpoint, meta={"tool": "nbstage", "config_hash": "abc"})
        again = Checkpoint.from_bytes(ckpt.to_bytes())
        assert again.meta == ckpt.meta and again.to_bytes() == ckpt.to_bytes()

    @pytest.mark.parametrize("cut", [1, 40, 1000])
    def test_truncated(self, trained, cut):
        blob = trained.checkpoint.to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob[:-cut])

    def test_flipped_byte(self, trained):
        blob = bytearray(trained.checkpoint.to_bytes())
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            Checkpoint.from_bytes(bytes(blob))

    def test_not_a_checkpoint(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"PK\x03\x04" + bytes(100))

    def test_version_mismatch_names_both(self, trained):
        blob = bytearray(trained.checkpoint.to_bytes())
        blob[8:12] = struct.pack("<I", 7)
        with pytest.raises(CheckpointVersionError, match=r"7.*1"):
            Checkpoint.from_bytes(bytes(blob))

    def test_foreign_vocabulary(self, trained):
        other = build_vocabulary([record_graph(r, 64) for r in synthetic_corpus(2)[0]], 2)
        with pytest.raises(VocabularyMismatch):
            trained.checkpoint.check_vocabulary(other)

    def test_best_checkpoint_has_lowest_validation_loss(self, trained):
        losses = trained.validation_losses
        assert losses[trained.best_epoch - 1] == min(losses)
