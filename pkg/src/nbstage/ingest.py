"""Reading ``.ipynb`` files into ordered cell records."""
from __future__ import annotations

import ast
import enum
import hashlib
import json
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

MAX_MARKDOWN_DISTANCE = 3

# libraries whose import keeps a notebook in the corpus
DATA_LIBRARIES = frozenset(
    {"pandas", "statsmodels", "gensim", "keras", "sklearn", "xgboost", "scipy"}
)
_LIBRARY_ALIASES = {"scikit-learn": "sklearn", "scikit-klearn": "sklearn", "scikit_learn": "sklearn"}

_MAGIC_LINE = re.compile(r"^\s*[%!?]")


class NotebookError(ValueError):
    pass


class NotebookParseError(NotebookError):
    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} at byte offset {byte_offset}")
        self.byte_offset = byte_offset


class NotebookSchemaError(NotebookError):
    pass


class CellKind(str, enum.Enum):
    CODE = "code"
    MARKDOWN = "markdown"


@dataclass(frozen=True)
class Cell:
    index: int
    kind: CellKind
    source: str


@dataclass
class NotebookDocument:
    notebook_id: str
    cells: list[Cell]
    dropped_cells: int = 0

    def code_cells(self) -> list[Cell]:
        return [c for c in self.cells if c.kind is CellKind.CODE]


@dataclass(frozen=True)
class CellRecord:
    notebook_id: str
    cell_index: int
    source: str
    markdown_context: str | None = None
    markdown_distance: int | None = None

    @property
    def cell_id(self) -> str:
        return make_cell_id(self.notebook_id, self.cell_index)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CellRecord":
        return cls(
            notebook_id=str(obj["notebook_id"]),
            cell_index=int(obj["cell_index"]),
            source=obj["source"],
            markdown_context=obj.get("markdown_context"),
            markdown_distance=obj.get("markdown_distance"),
        )


def make_cell_id(notebook_id: str, cell_index: int) -> str:
    return f"{notebook_id}:{cell_index}"


def split_cell_id(cell_id: str) -> tuple[str, int]:
    notebook_id, _, index = cell_id.rpartition(":")
    return notebook_id, int(index)


def _join_source(source) -> str:
    if source is None:
        return ""
    if isinstance(source, list):
        return "".join(source)
    return str(source)


def parse_notebook(raw: bytes, notebook_id: str = "") -> NotebookDocument:
    """Parse nbformat-4 JSON.

    Raw and unknown cell types are dropped and counted in ``dropped_cells``;
    remaining cells are renumbered densely from 0 in document order.
    """
    try:
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    except UnicodeDecodeError as exc:
        raise NotebookParseError("invalid UTF-8", exc.start) from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise NotebookParseError(f"malformed JSON ({exc.msg})", offset) from None
    if not isinstance(payload, dict) or "cells" not in payload:
        raise NotebookSchemaError("missing cells")
    if not isinstance(payload["cells"], list):
        raise NotebookSchemaError("cells is not a list")

    cells, dropped = [], 0
    for entry in payload["cells"]:
        try:
            kind = CellKind(entry.get("cell_type"))
        except (ValueError, AttributeError):
            dropped += 1
            continue
        cells.append(Cell(len(cells), kind, _join_source(entry.get("source"))))
    return NotebookDocument(notebook_id, cells, dropped)


def serialize_notebook(doc: NotebookDocument) -> bytes:
    """Minimal nbformat-4 rendering of a document (used for fixtures)."""
    cells = []
    for cell in doc.cells:
        entry = {
            "cell_type": cell.kind.value,
            "metadata": {},
            "source": cell.source.splitlines(keepends=True),
        }
        if cell.kind is CellKind.CODE:
            entry.update(execution_count=None, outputs=[])
        cells.append(entry)
    nb = {"cells": cells, "metadata": {}, "nbformat": 4, "nbformat_minor": 5}
    return json.dumps(nb, indent=1).encode("utf-8")


def associate_markdown(doc: NotebookDocument) -> list[CellRecord]:
    records = []
    last_md: Cell | None = None
    for cell in doc.cells:
        if cell.kind is CellKind.MARKDOWN:
            last_md = cell
            continue
        context = distance = None
        if last_md is not None and cell.index - last_md.index <= MAX_MARKDOWN_DISTANCE:
            context, distance = last_md.source, cell.index - last_md.index
        records.append(CellRecord(doc.notebook_id, cell.index, cell.source, context, distance))
    return records


def strip_magics(source: str) -> str:
    """Blank out IPython line magics and shell escapes so the cell parses as Python."""
    return "\n".join("" if _MAGIC_LINE.match(line) else line for line in source.split("\n"))


def parse_source(source: str) -> ast.Module:
    """Parse a cell after stripping magics; compile-time warnings from user code are silenced."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SyntaxWarning)
        warnings.simplefilter("ignore", DeprecationWarning)
        return ast.parse(strip_magics(source))


_IMPORT_LINE = re.compile(r"^\s*(?:import\s+([\w.\-]+(?:\s*,\s*[\w.\-]+)*)|from\s+([\w\-]+)[\w.]*\s+import\b)")


def imported_packages(source: str) -> set[str]:
    """Top-level package names imported by a code cell.

    Cells that do not parse fall back to a line-by-line pattern match, so one
    broken line does not hide the imports around it.
    """
    found = set()
    try:
        tree = parse_source(source)
    except (SyntaxError, ValueError):
        for line in source.split("\n"):
            m = _IMPORT_LINE.match(line)
            if m and m.group(1):
                found.update(part.strip().split(".")[0] for part in m.group(1).split(","))
            elif m:
                found.add(m.group(2))
    else:
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                found.update(alias.name.split(".")[0] for alias in node.names)
            elif isinstance(node, ast.ImportFrom) and node.module and not node.level:
                found.add(node.module.split(".")[0])
    return {_LIBRARY_ALIASES.get(name, name) for name in found}


def uses_data_library(doc: NotebookDocument) -> bool:
    return any(imported_packages(c.source) & DATA_LIBRARIES for c in doc.code_cells())


def _split_key(seed: int, notebook_id: str) -> str:
    return hashlib.sha256(f"{seed}:{notebook_id}".encode("utf-8")).hexdigest()


def filter_and_split(docs: Iterable[NotebookDocument], ratio: float = 0.9, seed: int = 0):
    """Keep data-analysis notebooks and split them by notebook into (train, validation).

    Membership depends only on the seed and the kept notebook ids; exactly
    ``round(ratio * n)`` notebooks go to the training side.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    kept = [d for d in docs if uses_data_library(d)]
    kept.sort(key=lambda d: (_split_key(seed, d.notebook_id), d.notebook_id))
    cut = int(round(ratio * len(kept)))
    train = sorted(kept[:cut], key=lambda d: d.notebook_id)
    validation = sorted(kept[cut:], key=lambda d: d.notebook_id)
    return train, validation


def iter_notebook_files(root: Path) -> Iterator[Path]:
    root = Path(root)
    if root.is_file():
        yield root
        return
    yield from sorted(p for p in root.rglob("*.ipynb") if ".ipynb_checkpoints" not in p.parts)


@dataclass
class IngestReport:
    notebooks: int = 0
    failed: list[str] = field(default_factory=list)
    dropped_cells: int = 0


def load_notebooks(root: Path, report: IngestReport | None = None) -> list[NotebookDocument]:
    """Parse every notebook under ``root``; unreadable files are recorded, not fatal."""
    root = Path(root)
    report = report if report is not None else IngestReport()
    docs = []
    for path in iter_notebook_files(root):
        notebook_id = path.relative_to(root).as_posix() if root.is_dir() else path.name
        try:
            doc = parse_notebook(path.read_bytes(), notebook_id)
        except NotebookError as exc:
            report.failed.append(f"{notebook_id}: {exc}")
            continue
        report.notebooks += 1
        report.dropped_cells += doc.dropped_cells
        docs.append(doc)
    return docs
