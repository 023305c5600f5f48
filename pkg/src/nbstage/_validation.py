"""Argument checks shared by the estimator and the CLI."""
from __future__ import annotations

import os
from typing import Sequence

from .ingest import CellRecord
from .weak_label import WeakLabel

FLOAT_WIDTH_ENV = "CORAL_FLOAT_WIDTH"


def check_records(X) -> list[CellRecord]:
    if isinstance(X, CellRecord):
        raise TypeError("expected a sequence of CellRecord, got a single record")
    records = list(X)
    bad = [type(r).__name__ for r in records if not isinstance(r, CellRecord)]
    if bad:
        raise TypeError(f"expected CellRecord items, got {bad[0]}")
    return records


def check_weak_labels(y, records: Sequence[CellRecord]) -> list[WeakLabel]:
    """Labels must be WeakLabel objects aligned with ``records`` by cell id."""
    labels = list(y)
    if len(labels) != len(records):
        raise ValueError(f"{len(records)} records but {len(labels)} labels")
    for lab, rec in zip(labels, records):
        if not isinstance(lab, WeakLabel):
            raise TypeError(
                f"training accepts weak labels only; got {type(lab).__name__} for {rec.cell_id}"
            )
        if lab.cell_id != rec.cell_id:
            raise ValueError(f"label {lab.cell_id} is not aligned with record {rec.cell_id}")
    return labels


def check_fraction(value: float, name: str, *, inclusive_high: bool = False) -> float:
    ok = 0 < value <= 1 if inclusive_high else 0 < value < 1
    if not ok:
        bracket = "]" if inclusive_high else ")"
        raise ValueError(f"{name} must lie in (0, 1{bracket}, got {value}")
    return float(value)


def resolve_float_width(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get(FLOAT_WIDTH_ENV, "64"))
    if value not in (32, 64):
        raise ValueError(f"float width must be 32 or 64, got {value}")
    return value
