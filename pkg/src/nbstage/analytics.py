"""Evaluation against expert labels and corpus-level stage statistics."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from .astgraph import resolve_notebook_calls
from .ingest import CellRecord, split_cell_id
from .weak_label import REAL_STAGES, Stage

N_REAL = len(REAL_STAGES)


class AlignmentError(ValueError):
    def __init__(self, missing_from_gold: Sequence[str], missing_from_predictions: Sequence[str]):
        parts = []
        if missing_from_gold:
            parts.append(f"ids without gold label: {', '.join(sorted(missing_from_gold))}")
        if missing_from_predictions:
            parts.append(f"ids without prediction: {', '.join(sorted(missing_from_predictions))}")
        super().__init__("; ".join(parts))
        self.missing_from_gold = sorted(missing_from_gold)
        self.missing_from_predictions = sorted(missing_from_predictions)


@dataclass(frozen=True)
class GoldLabel:
    """Expert annotation; evaluation only."""

    cell_id: str
    stage: Stage

    def __post_init__(self):
        if self.stage is Stage.UNLABELED:
            raise ValueError("gold labels must be one of the five real stages")


def read_gold_csv(path) -> list[GoldLabel]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    return [GoldLabel(r["cell_id"], Stage[r["stage"].strip().upper()]) for r in rows]


def _stage_of(pred) -> Stage:
    return pred.predicted if hasattr(pred, "predicted") else Stage(pred)


def _as_mapping(predictions) -> dict[str, Stage]:
    if isinstance(predictions, Mapping):
        return {k: _stage_of(v) for k, v in predictions.items()}
    return {p.cell_id: _stage_of(p) for p in predictions}


def evaluate_against_gold(predictions, gold: Iterable[GoldLabel]):
    """Accuracy and a 5x5 confusion matrix (rows gold, columns predicted)."""
    pred = _as_mapping(predictions)
    truth = {g.cell_id: g.stage for g in gold}
    missing_gold = set(pred) - set(truth)
    missing_pred = set(truth) - set(pred)
    if missing_gold or missing_pred:
        raise AlignmentError(missing_gold, missing_pred)
    ids = sorted(truth)
    if not ids:
        return float("nan"), np.zeros((N_REAL, N_REAL), dtype=int)
    y_true = [int(truth[i]) for i in ids]
    y_pred = [int(pred[i]) for i in ids]
    cm = confusion_matrix(y_true, y_pred, labels=list(range(N_REAL)))
    return float(np.trace(cm) / cm.sum()), cm


def function_stage_distribution(predictions, records: Sequence[CellRecord], function_name: str):
    """Fraction of predicted stages among cells that call ``function_name``.

    Returns ``None`` when no cell calls it.
    """
    pred = _as_mapping(predictions)
    by_notebook: dict[str, list[CellRecord]] = defaultdict(list)
    for r in records:
        by_notebook[r.notebook_id].append(r)
    counts = np.zeros(N_REAL)
    for group in by_notebook.values():
        for cell_id, calls in resolve_notebook_calls(group).items():
            if calls and function_name in calls and cell_id in pred:
                counts[pred[cell_id]] += 1
    if counts.sum() == 0:
        return None
    return {REAL_STAGES[i]: counts[i] / counts.sum() for i in range(N_REAL) if counts[i]}


def stage_entropy(fractions) -> float:
    """Natural-log entropy with 0 log 0 = 0."""
    p = np.asarray(fractions, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


@dataclass
class StageProfile:
    group_id: str
    fractions: np.ndarray | None
    entropy: float | None
    n_cells: int

    @property
    def defined(self) -> bool:
        return self.fractions is not None

    def csv_row(self) -> list:
        if not self.defined:
            return [self.group_id] + [""] * N_REAL + ["", self.n_cells]
        return [self.group_id] + [repr(float(p)) for p in self.fractions] + [repr(self.entropy), self.n_cells]


PROFILE_COLUMNS = ["group_id"] + [f"p_{s.name}" for s in REAL_STAGES] + ["entropy", "n_cells"]


def notebook_stage_profile(stages: Sequence, group_id: str = "", weights: Sequence[float] | None = None) -> StageProfile:
    """Stage fractions and entropy for one notebook (or concatenated group of notebooks).

    ``stages`` holds predicted stages; ``None`` or UNLABELED entries are
    ignored. ``weights`` (e.g. line counts) switches to weighted fractions.
    """
    weights = [1.0] * len(stages) if weights is None else list(weights)
    counts = np.zeros(N_REAL)
    n = 0
    for stage, w in zip(stages, weights):
        if stage is None or Stage(stage) is Stage.UNLABELED:
            continue
        counts[int(stage)] += w
        n += 1
    if counts.sum() == 0:
        return StageProfile(group_id, None, None, n)
    fractions = counts / counts.sum()
    return StageProfile(group_id, fractions, stage_entropy(fractions), n)


def ordered_predictions(predictions) -> dict[str, list]:
    """Predicted stages grouped by notebook, in cell order."""
    groups: dict[str, list[tuple[int, Stage]]] = defaultdict(list)
    for cell_id, stage in _as_mapping(predictions).items():
        nb, idx = split_cell_id(cell_id)
        groups[nb].append((idx, stage))
    return {nb: [s for _, s in sorted(cells)] for nb, cells in sorted(groups.items())}


def profiles_by_group(predictions, group_of: Mapping[str, str] | None = None) -> list[StageProfile]:
    """Profiles per notebook, or per group when ``group_of`` maps notebook ids to group ids."""
    per_notebook = ordered_predictions(predictions)
    grouped: dict[str, list] = defaultdict(list)
    for nb, stages in per_notebook.items():
        grouped[group_of.get(nb, nb) if group_of else nb].extend(stages)
    return [notebook_stage_profile(stages, gid) for gid, stages in sorted(grouped.items())]


@dataclass
class TransitionStats:
    counts: np.ndarray
    matrix: np.ndarray
    different_next: np.ndarray
    overall_different_next: float
    n_transitions: int


def transition_stats(sequences: Iterable[Sequence], bridge: bool = True) -> TransitionStats:
    """Stage-to-stage transitions between consecutive labeled cells of each notebook.

    ``None``/UNLABELED entries are skipped over when ``bridge`` is true and
    break the chain otherwise.
    """
    counts = np.zeros((N_REAL, N_REAL))
    for seq in sequences:
        prev = None
        for stage in seq:
            if stage is None or Stage(stage) is Stage.UNLABELED:
                if not bridge:
                    prev = None
                continue
            if prev is not None:
                counts[int(prev), int(stage)] += 1
            prev = stage
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = np.where(totals > 0, counts / np.where(totals > 0, totals, 1), 0.0)
        different = np.where(totals[:, 0] > 0, 1.0 - np.diag(matrix), np.nan)
    n = int(counts.sum())
    overall = float((n - np.trace(counts)) / n) if n else math.nan
    return TransitionStats(counts, matrix, different, overall, n)


def write_profiles_csv(path, profiles: Sequence[StageProfile], header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROFILE_COLUMNS)
        for profile in profiles:
            writer.writerow(profile.csv_row())
