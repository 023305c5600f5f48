"""Mini-batch training with early stopping, and the checkpoint file format."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor, sgd_step
from .model import ModelConfig, collate, forward, init_params
from .objectives import LossWeights, batch_objective, sample_negatives
from .vocab import EncodedGraph, Vocabulary
from .weak_label import WeakLabel

CHECKPOINT_MAGIC = b"NBSTAGE\x00"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 16
    max_epochs: int = 8
    patience: int | None = 3
    learning_rate: float = 1e-5
    momentum: float = 0.9
    n_negatives: int = 5
    seed: int = 0
    float_width: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    normalize_hinge: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.n_negatives <= 0:
            raise ValueError("batch_size, max_epochs and n_negatives must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")
        if self.patience is not None and not 0 < self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [1, max_epochs] or be None")
        if self.float_width not in (32, 64):
            raise ValueError("float_width must be 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.float_width == 64 else np.float32


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self._stale = 0

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self._stale = loss, self.epoch, 0
        else:
            self._stale += 1
        return self.patience is not None and self._stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# checkpoint -------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str
    step: int = 0
    velocity: dict[str, np.ndarray] | None = None
    version: int = CHECKPOINT_VERSION
    meta: dict | None = None

    def tensors(self, dtype=np.float64) -> dict[str, Tensor]:
        return {
            name: Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)
            for name, value in self.params.items()
        }

    def check_vocabulary(self, vocab: Vocabulary) -> None:
        if vocab.content_hash != self.vocab_hash:
            raise VocabularyMismatch(
                f"vocabulary hash {vocab.content_hash[:12]} does not match checkpoint {self.vocab_hash[:12]}"
            )

    def to_bytes(self) -> bytes:
        fields = {"model_config": self.model_config.to_json(), "vocab_hash": self.vocab_hash, "step": self.step}
        if self.meta:
            fields["_meta"] = self.meta
        header = json.dumps(
            fields, sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        named = [(f"param/{k}", v) for k, v in sorted(self.params.items())]
        if self.velocity:
            named += [(f"velocity/{k}", v) for k, v in sorted(self.velocity.items())]
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", self.version))
        buf.write(struct.pack("<Q", len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(named)))
        for name, value in named:
            raw_name = name.encode("utf-8")
            value = np.asarray(value, dtype="<f8")
            buf.write(struct.pack("<I", len(raw_name)))
            buf.write(raw_name)
            buf.write(struct.pack("<I", value.ndim))
            buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            buf.write(np.ascontiguousarray(value).tobytes())
        payload = buf.getvalue()
        return payload + hashlib.sha256(payload).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32 or not blob.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic or truncated)")
        (version,) = struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )
        payload, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
        try:
            return cls._parse(payload, version)
        except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint payload: {exc}") from None

    @classmethod
    def _parse(cls, payload: bytes, version: int) -> "Checkpoint":
        pos = len(CHECKPOINT_MAGIC) + 4
        (hlen,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        header = json.loads(payload[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        params, velocity = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            end = pos + 8 * size
            if end > len(payload):
                raise ValueError(f"tensor {name!r} runs past end of payload")
            value = np.frombuffer(payload[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
            pos = end
            kind, _, key = name.partition("/")
            (params if kind == "param" else velocity)[key] = value
        if pos != len(payload):
            raise ValueError("trailing bytes after tensors")
        return cls(
            ModelConfig(**header["model_config"]), params, header["vocab_hash"],
            int(header["step"]), velocity or None, version, header.get("_meta"),
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.astype(np.float64, copy=True) for name, t in params.items()}


# training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    validation_losses: list[float]
    best_epoch: int
    step_losses: list[float]
    epochs_run: int


def _check_weak_labels(labels, graphs, what: str) -> None:
    if len(labels) != len(graphs):
        raise ValueError(f"{what}: {len(graphs)} graphs but {len(labels)} labels")
    for lab in labels:
        if not isinstance(lab, WeakLabel):
            raise TypeError(
                f"{what}: training accepts WeakLabel instances only, got {type(lab).__name__}"
            )


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_loss(params, graphs, labels, model_config: ModelConfig, config: TrainerConfig,
                  seed_offset: int = 0) -> float:
    """Size-weighted mean combined loss over fixed batches."""
    rng = np.random.default_rng([config.seed, 1_000_003, seed_offset])
    total, count = 0.0, 0
    order = np.arange(len(graphs))
    for idx in _batches(len(graphs), config.batch_size, order):
        batch = collate([graphs[i] for i in idx])
        out = forward(params, batch, model_config)
        negatives = sample_negatives(len(idx), config.n_negatives, rng)
        _, report = batch_objective(out, [labels[i] for i in idx], params["R"], negatives,
                                    config.weights, config.normalize_hinge)
        total += report.total * len(idx)
        count += len(idx)
    return total / count


def train(train_graphs: Sequence[EncodedGraph], train_labels: Sequence[WeakLabel],
          val_graphs: Sequence[EncodedGraph], val_labels: Sequence[WeakLabel],
          model_config: ModelConfig, config: TrainerConfig, vocab: Vocabulary,
          log: Callable[[dict], None] | None = None,
          on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train on weak labels only and return the checkpoint with the best validation loss."""
    if not train_graphs:
        raise TrainingError("empty training set")
    _check_weak_labels(train_labels, train_graphs, "training set")
    _check_weak_labels(val_labels, val_graphs, "validation set")
    if not val_graphs:
        raise TrainingError("empty validation set")

    params = init_params(model_config, len(vocab), config.seed, config.dtype)
    state = OptimizerState(config.learning_rate, config.momentum)
    stopper = EarlyStopping(config.patience)
    best = snapshot(params)
    best_velocity = {}
    best_step = 0
    step, step_losses, val_losses = 0, [], []

    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_graphs))
        for idx in _batches(len(train_graphs), config.batch_size, order):
            batch = collate([train_graphs[i] for i in idx])
            labels = [train_labels[i] for i in idx]
            negatives = sample_negatives(len(idx), config.n_negatives, rng)
            for p in params.values():
                p.zero_grad()
            out = forward(params, batch, model_config)
            loss, report = batch_objective(out, labels, params["R"], negatives,
                                           config.weights, config.normalize_hinge)
            step += 1
            if not np.isfinite(report.total):
                raise TrainingError(f"non-finite loss {report.total} at step {step} (epoch {epoch + 1})")
            ad.backward(loss)
            sgd_step(
                {n: p.data for n, p in params.items()},
                {n: p.grad for n, p in params.items() if p.grad is not None},
                state,
            )
            step_losses.append(report.total)
            if log is not None:
                log(report.to_log(step))
        val_loss = evaluate_loss(params, val_graphs, val_labels, model_config, config)
        val_losses.append(val_loss)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best = snapshot(params)
            best_velocity = {k: v.astype(np.float64, copy=True) for k, v in state.velocity.items()}
            best_step = step
        if on_epoch is not None:
            on_epoch(epoch + 1, {"validation_loss": val_loss, "params": params})
        if stop:
            break

    checkpoint = Checkpoint(model_config, best, vocab.content_hash, best_step, best_velocity or None)
    return TrainResult(checkpoint, val_losses, stopper.best_epoch, step_losses, len(val_losses))
