"""scikit-learn style front end for the cell stage classifier."""
from __future__ import annotations

import hashlib
import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction, check_records, check_weak_labels, resolve_float_width
from .astgraph import UnparseableCell, record_graph
from .model import ModelConfig, StagePrediction, predict_graphs
from .objectives import LossWeights
from .trainer import Checkpoint, TrainerConfig, train
from .vocab import Vocabulary, build_vocabulary, encode_graph
from .weak_label import N_STAGES, REAL_STAGES

logger = logging.getLogger(__name__)


def graphs_for(records, max_nodes: int):
    """(index, CellGraph) for every parseable record, plus the number skipped."""
    out, skipped = [], 0
    for i, record in enumerate(records):
        try:
            out.append((i, record_graph(record, max_nodes)))
        except UnparseableCell:
            skipped += 1
    return out, skipped


def split_by_notebook(records, fraction: float, seed: int):
    """Boolean mask of validation records; whole notebooks go to one side."""
    notebooks = sorted({r.notebook_id for r in records},
                       key=lambda nb: hashlib.sha256(f"{seed}:{nb}".encode()).hexdigest())
    n_val = int(round(fraction * len(notebooks)))
    if len(notebooks) > 1:
        n_val = min(max(n_val, 1), len(notebooks) - 1)
    else:
        n_val = 0
    held = set(notebooks[:n_val])
    return np.array([r.notebook_id in held for r in records], dtype=bool)


class StageClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Predict data-analysis stages of notebook code cells from weak labels.

    ``fit`` takes a sequence of :class:`CellRecord` and aligned
    :class:`WeakLabel` objects. ``predict_proba`` returns six columns
    (five stages plus UNLABELED); ``predict`` only ever returns the five real
    stages. ``transform`` yields the topic distribution of each cell.
    """

    def __init__(self, d_model=256, n_heads=4, n_layers=4, n_topics=50, max_nodes=160,
                 batch_size=16, max_epochs=8, patience=3, learning_rate=1e-5, momentum=0.9,
                 n_negatives=5, weak_weight=0.1, unique_stage_weight=0.3,
                 reconstruction_weight=1.0, unique_topic_weight=1.0, normalize_hinge=True,
                 min_count=2, validation_fraction=0.1, random_state=0, float_width=None):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_topics = n_topics
        self.max_nodes = max_nodes
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.n_negatives = n_negatives
        self.weak_weight = weak_weight
        self.unique_stage_weight = unique_stage_weight
        self.reconstruction_weight = reconstruction_weight
        self.unique_topic_weight = unique_topic_weight
        self.normalize_hinge = normalize_hinge
        self.min_count = min_count
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.float_width = float_width

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_model, self.n_heads, self.n_layers, self.n_topics, self.max_nodes)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            learning_rate=self.learning_rate, momentum=self.momentum, n_negatives=self.n_negatives,
            seed=self.random_state, float_width=resolve_float_width(self.float_width),
            weights=LossWeights(self.weak_weight, self.unique_stage_weight,
                                self.reconstruction_weight, self.unique_topic_weight),
            normalize_hinge=self.normalize_hinge,
        )

    def fit(self, X, y, eval_set=None, log=None):
        records = check_records(X)
        labels = check_weak_labels(y, records)
        model_config, trainer_config = self.model_config(), self.trainer_config()

        if eval_set is None:
            fraction = check_fraction(self.validation_fraction, "validation_fraction")
            held = split_by_notebook(records, fraction, self.random_state)
            if not held.any():
                logger.warning("only one notebook; validating on the training data")
                val_records, val_labels = records, labels
            else:
                val_records = [r for r, h in zip(records, held) if h]
                val_labels = [lab for lab, h in zip(labels, held) if h]
                records = [r for r, h in zip(records, held) if not h]
                labels = [lab for lab, h in zip(labels, held) if not h]
        else:
            val_records = check_records(eval_set[0])
            val_labels = check_weak_labels(eval_set[1], val_records)

        train_graphs, skipped = graphs_for(records, model_config.max_nodes)
        val_graphs, val_skipped = graphs_for(val_records, model_config.max_nodes)
        self.n_unparseable_ = skipped + val_skipped
        self.vocabulary_ = build_vocabulary((g for _, g in train_graphs), self.min_count)
        encode = lambda pairs, recs: [encode_graph(g, self.vocabulary_, recs[i].cell_id) for i, g in pairs]
        result = train(
            encode(train_graphs, records), [labels[i] for i, _ in train_graphs],
            encode(val_graphs, val_records), [val_labels[i] for i, _ in val_graphs],
            model_config, trainer_config, self.vocabulary_, log=log,
        )
        self.checkpoint_ = result.checkpoint
        self.validation_losses_ = result.validation_losses
        self.best_epoch_ = result.best_epoch
        self.step_losses_ = result.step_losses
        self._load_params()
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, vocabulary: Vocabulary, **params):
        checkpoint.check_vocabulary(vocabulary)
        cfg = checkpoint.model_config
        est = cls(d_model=cfg.d_model, n_heads=cfg.n_heads, n_layers=cfg.n_layers,
                  n_topics=cfg.n_topics, max_nodes=cfg.max_nodes, **params)
        est.checkpoint_ = checkpoint
        est.vocabulary_ = vocabulary
        est.n_unparseable_ = 0
        est._load_params()
        return est

    @property
    def classes_(self):
        return np.arange(N_STAGES)

    def _load_params(self):
        dtype = np.float64 if resolve_float_width(self.float_width) == 64 else np.float32
        self.params_ = self.checkpoint_.tensors(dtype)

    def _encode_all(self, X):
        check_is_fitted(self, "checkpoint_")
        records = check_records(X)
        graphs = []
        for record in records:
            try:
                graph = record_graph(record, self.checkpoint_.model_config.max_nodes)
            except UnparseableCell:
                raise ValueError(
                    f"cell {record.cell_id} does not parse; use predict_stages to skip such cells"
                ) from None
            graphs.append(encode_graph(graph, self.vocabulary_, record.cell_id))
        return graphs

    def predict_stages(self, X) -> tuple[list[StagePrediction], int]:
        """Predictions for parseable cells and the number of cells skipped."""
        check_is_fitted(self, "checkpoint_")
        records = check_records(X)
        pairs, skipped = graphs_for(records, self.checkpoint_.model_config.max_nodes)
        graphs = [encode_graph(g, self.vocabulary_, records[i].cell_id) for i, g in pairs]
        self.n_skipped_ = skipped
        if not graphs:
            return [], skipped
        return predict_graphs(self.params_, graphs, self.checkpoint_.model_config), skipped

    def _outputs(self, X):
        graphs = self._encode_all(X)
        return predict_graphs(self.params_, graphs, self.checkpoint_.model_config) if graphs else []

    def predict_proba(self, X) -> np.ndarray:
        preds = self._outputs(X)
        return np.array([p.p_stage for p in preds]).reshape(len(preds), N_STAGES)

    def predict(self, X) -> np.ndarray:
        return np.array([int(p.predicted) for p in self._outputs(X)], dtype=int)

    def transform(self, X) -> np.ndarray:
        preds = self._outputs(X)
        return np.array([p.p_topic for p in preds]).reshape(len(preds), self.checkpoint_.model_config.n_topics)

    def embed(self, X) -> np.ndarray:
        """[CLS] readout for each cell."""
        preds = self._outputs(X)
        return np.array([p.z for p in preds]).reshape(len(preds), self.checkpoint_.model_config.d_model)

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy on covered weak labels (or on plain stage codes)."""
        records = check_records(X)
        stages = np.array([int(getattr(lab, "stage", lab)) for lab in y])
        keep = stages < len(REAL_STAGES)
        if not keep.any():
            return float("nan")
        subset = [r for r, k in zip(records, keep) if k]
        preds, _ = self.predict_stages(subset)
        by_id = {p.cell_id: int(p.predicted) for p in preds}
        hits = [by_id.get(r.cell_id) == s for r, s in zip(subset, stages[keep])]
        return float(np.mean(hits))
