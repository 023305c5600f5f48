"""Heuristic stage labels for code cells.

Five rules fire independently; when several fire, the stage with the highest
priority wins (IMPORT > MODEL > EVALUATE > EXPLORE > WRANGLE). Cells no rule
covers get the placeholder stage UNLABELED, which training ignores.
"""
from __future__ import annotations

import ast
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from .astgraph import UnparseableCell, parse_cell_ast, resolve_call_names, ImportAliasTable, tokenize_markdown
from .ingest import CellRecord, strip_magics


class Stage(enum.IntEnum):
    IMPORT = 0
    WRANGLE = 1
    EXPLORE = 2
    MODEL = 3
    EVALUATE = 4
    UNLABELED = 5


N_STAGES = len(Stage)
REAL_STAGES = tuple(s for s in Stage if s is not Stage.UNLABELED)
PRIORITY = (Stage.IMPORT, Stage.MODEL, Stage.EVALUATE, Stage.EXPLORE, Stage.WRANGLE)

IMPORT_FRACTION = 0.3
MAX_MARKDOWN_WORDS = 4
MODEL_PHRASES = ("logistic regression", "machine learning", "random forest")
EVALUATE_PHRASES = ("cross validation",)

RULE_SEED, RULE_ONE_LINER, RULE_IMPORTS, RULE_MODEL_MARKDOWN, RULE_EVALUATE_MARKDOWN = 1, 2, 3, 4, 5


def resolve_priority(stages: Iterable[Stage]) -> Stage:
    stages = set(stages)
    for stage in PRIORITY:
        if stage in stages:
            return stage
    return Stage.UNLABELED


# seed table -------------------------------------------------------------------

def load_seed_table(path=None) -> dict[str, Stage]:
    """Seed functions as ``{qualified name: stage}``; defaults to the shipped table."""
    if path is None:
        text = resources.files("nbstage").joinpath("data/seed_functions.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    table = {}
    for name, stage in raw.items():
        stage = Stage[stage]
        if stage not in (Stage.WRANGLE, Stage.EXPLORE, Stage.MODEL, Stage.EVALUATE):
            raise ValueError(f"seed {name!r} maps to unsupported stage {stage.name}")
        table[name] = stage
    return table


@lru_cache(maxsize=1)
def default_seed_table() -> Mapping[str, Stage]:
    return load_seed_table()


# labels -----------------------------------------------------------------------

@dataclass(frozen=True)
class WeakLabel:
    cell_id: str
    stage: Stage
    fired_rules: frozenset = field(default_factory=frozenset)

    @property
    def covered(self) -> bool:
        return self.stage is not Stage.UNLABELED

    def one_hot(self) -> np.ndarray:
        y = np.zeros(N_STAGES)
        if self.covered:
            y[self.stage] = 1.0
        return y

    def to_json(self) -> dict:
        return {"cell_id": self.cell_id, "stage": self.stage.name, "fired_rules": sorted(self.fired_rules)}

    @classmethod
    def from_json(cls, obj: dict) -> "WeakLabel":
        return cls(obj["cell_id"], Stage[obj["stage"]], frozenset(obj.get("fired_rules", ())))


@dataclass(frozen=True)
class CellStats:
    n_lines: int
    n_statements: int
    n_imports: int
    creates_variable: bool
    markdown_words: int


_BINDING_STATEMENTS = (ast.Assign, ast.AugAssign, ast.AnnAssign, ast.For, ast.AsyncFor)


def _binds(stmt: ast.stmt) -> bool:
    if isinstance(stmt, _BINDING_STATEMENTS):
        return True
    if isinstance(stmt, (ast.With, ast.AsyncWith)):
        return any(item.optional_vars is not None for item in stmt.items)
    return False


def compute_cell_stats(record: CellRecord, tree=None) -> CellStats:
    """Statistics the rules read; raises :class:`UnparseableCell`."""
    tree = tree if tree is not None else parse_cell_ast(record.source)
    body = tree.syntax.body
    lines = [
        line for line in strip_magics(record.source).split("\n")
        if line.strip() and not line.strip().startswith("#")
    ]
    return CellStats(
        n_lines=len(lines),
        n_statements=len(body),
        n_imports=sum(isinstance(s, (ast.Import, ast.ImportFrom)) for s in body),
        creates_variable=any(_binds(s) for s in body),
        markdown_words=len(tokenize_markdown(record.markdown_context)),
    )


def _mentions(markdown: str | None, phrases) -> bool:
    text = f" {' '.join(tokenize_markdown(markdown))} "
    return any(f" {p} " in text for p in phrases)


def label_cell(record: CellRecord, calls: set[str] | None, stats: CellStats | None,
               seeds: Mapping[str, Stage] | None = None) -> WeakLabel:
    """Apply the five rules to one cell. ``stats=None`` marks an unparseable cell."""
    if stats is None or calls is None:
        return WeakLabel(record.cell_id, Stage.UNLABELED)
    seeds = default_seed_table() if seeds is None else seeds
    fired: dict[int, set[Stage]] = defaultdict(set)

    for name in calls:
        if name in seeds:
            fired[RULE_SEED].add(seeds[name])
    if stats.n_lines == 1 and stats.n_statements >= 1 and not stats.creates_variable:
        fired[RULE_ONE_LINER].add(Stage.EXPLORE)
    if stats.n_statements and stats.n_imports / stats.n_statements > IMPORT_FRACTION:
        fired[RULE_IMPORTS].add(Stage.IMPORT)
    if stats.markdown_words < MAX_MARKDOWN_WORDS:
        if _mentions(record.markdown_context, MODEL_PHRASES):
            fired[RULE_MODEL_MARKDOWN].add(Stage.MODEL)
        if _mentions(record.markdown_context, EVALUATE_PHRASES):
            fired[RULE_EVALUATE_MARKDOWN].add(Stage.EVALUATE)

    stage = resolve_priority(s for stages in fired.values() for s in stages)
    return WeakLabel(record.cell_id, stage, frozenset(fired))


def label_records(records: list[CellRecord], seeds: Mapping[str, Stage] | None = None) -> list[WeakLabel]:
    """Label records, threading import aliases through each notebook in cell order."""
    by_notebook: dict[str, list[CellRecord]] = defaultdict(list)
    for record in records:
        by_notebook[record.notebook_id].append(record)
    out: dict[str, WeakLabel] = {}
    for group in by_notebook.values():
        table = ImportAliasTable()
        for record in sorted(group, key=lambda r: r.cell_index):
            try:
                tree = parse_cell_ast(record.source)
            except UnparseableCell:
                out[record.cell_id] = label_cell(record, None, None, seeds)
                continue
            calls = resolve_call_names(tree, table)
            out[record.cell_id] = label_cell(record, calls, compute_cell_stats(record, tree), seeds)
    return [out[r.cell_id] for r in records]


def label_corpus(records: list[CellRecord], seeds: Mapping[str, Stage] | None = None):
    """Labels for every record plus the fraction of records that are covered."""
    labels = label_records(records, seeds)
    coverage = sum(lab.covered for lab in labels) / len(labels) if labels else 0.0
    return labels, coverage


def subsample_supervision(labels: list[WeakLabel], keep: float, seed: int = 0) -> list[WeakLabel]:
    """Retain ``floor(keep * k)`` of the ``k`` covered labels; the rest become UNLABELED."""
    if not 0 < keep <= 1:
        raise ValueError(f"keep must lie in (0, 1], got {keep}")
    if keep == 1:
        return list(labels)
    covered = [i for i, lab in enumerate(labels) if lab.covered]
    n_keep = int(np.floor(keep * len(covered)))
    rng = np.random.default_rng(seed)
    retained = set(rng.permutation(covered)[:n_keep].tolist()) if covered else set()
    return [
        lab if (not lab.covered or i in retained) else WeakLabel(lab.cell_id, Stage.UNLABELED)
        for i, lab in enumerate(labels)
    ]
