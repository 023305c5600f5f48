"""Cell ASTs, call-name resolution, and the attention graph built over them."""
from __future__ import annotations

import ast
import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .ingest import CellRecord, parse_source

CLS_TOKEN = "[CLS]"

# node kinds labeled by their identifier rather than their syntactic kind
_LEXEME_KINDS = {
    ast.Name: "id",
    ast.Attribute: "attr",
    ast.arg: "arg",
    ast.keyword: "arg",
    ast.alias: "name",
}
_MARKDOWN_TOKEN = re.compile(r"[^\W_]+")


class UnparseableCell(ValueError):
    pass


class NodeKind(str, enum.Enum):
    CLS = "CLS"
    AST = "AST"
    MARKDOWN = "MARKDOWN"


@dataclass(frozen=True)
class AstNode:
    node_id: int
    kind: str
    lexeme: str | None = None

    @property
    def label(self) -> str:
        return self.lexeme if self.lexeme is not None else self.kind


@dataclass
class AstTree:
    nodes: list[AstNode]
    parent: dict[int, int]
    root: int = 0
    syntax: ast.Module | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.nodes)

    def edges(self) -> list[tuple[int, int]]:
        return sorted((p, c) for c, p in self.parent.items())


def tokenize_markdown(text: str | None) -> list[str]:
    """Lowercase, split on whitespace and punctuation, drop punctuation-only pieces."""
    if not text:
        return []
    return _MARKDOWN_TOKEN.findall(text.lower())


def _constant_tag(value) -> str:
    return f"<{type(value).__name__}>"


def parse_cell_ast(source: str) -> AstTree:
    """Pre-order AST of a code cell.

    Raises :class:`UnparseableCell` on syntax errors; callers are expected to
    skip and count such cells.
    """
    try:
        module = parse_source(source)
    except (SyntaxError, ValueError) as exc:
        raise UnparseableCell(str(exc)) from None

    nodes: list[AstNode] = []
    parent: dict[int, int] = {}
    stack: list[tuple[ast.AST, int | None]] = [(module, None)]
    while stack:
        node, parent_id = stack.pop()
        node_id = len(nodes)
        kind = type(node).__name__
        lexeme = None
        attr = _LEXEME_KINDS.get(type(node))
        if attr is not None:
            lexeme = getattr(node, attr, None)
        elif isinstance(node, ast.Constant):
            lexeme = _constant_tag(node.value)
        nodes.append(AstNode(node_id, kind, lexeme))
        if parent_id is not None:
            parent[node_id] = parent_id
        children = [c for c in ast.iter_child_nodes(node) if not isinstance(c, ast.expr_context)]
        stack.extend((child, node_id) for child in reversed(children))
    return AstTree(nodes, parent, 0, module)


# call-name resolution ---------------------------------------------------------

@dataclass
class ImportAliasTable:
    """Names bound by imports, and variables bound to the result of a resolved call."""

    aliases: dict[str, str] = field(default_factory=dict)
    variables: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ImportAliasTable":
        return ImportAliasTable(dict(self.aliases), dict(self.variables))

    def bind_import(self, local: str, qualified: str) -> None:
        self.aliases[local] = qualified
        self.variables.pop(local, None)

    def bind_variable(self, local: str, qualified: str | None) -> None:
        self.aliases.pop(local, None)
        if qualified is None:
            self.variables.pop(local, None)
        else:
            self.variables[local] = qualified


class _CallResolver(ast.NodeVisitor):
    def __init__(self, table: ImportAliasTable):
        self.table = table
        self.names: set[str] = set()

    def qualify(self, expr) -> tuple[str | None, bool]:
        """Qualified name for ``expr`` and whether it went through a tracked variable."""
        if isinstance(expr, ast.Name):
            if expr.id in self.table.variables:
                return self.table.variables[expr.id], True
            return self.table.aliases.get(expr.id), False
        if isinstance(expr, ast.Attribute):
            base, via_var = self.qualify(expr.value)
            return (f"{base}.{expr.attr}" if base else None), via_var
        if isinstance(expr, ast.Call):
            return self.qualify(expr.func)
        return None, False

    def visit_Import(self, node):
        for alias in node.names:
            if alias.asname:
                self.table.bind_import(alias.asname, alias.name)
            else:
                top = alias.name.split(".")[0]
                self.table.bind_import(top, top)

    def visit_ImportFrom(self, node):
        if node.level or not node.module:
            return
        for alias in node.names:
            if alias.name == "*":
                continue
            self.table.bind_import(alias.asname or alias.name, f"{node.module}.{alias.name}")

    def visit_Call(self, node):
        name, _ = self.qualify(node.func)
        if name:
            self.names.add(name)
        self.generic_visit(node)

    def _bind_targets(self, targets, value):
        produced = None
        if isinstance(value, ast.Call):
            name, via_var = self.qualify(value.func)
            # one assignment step only
            produced = name if not via_var else None
        for target in targets:
            if isinstance(target, ast.Name):
                self.table.bind_variable(target.id, produced if len(targets) == 1 else None)
            else:
                self._unbind(target)

    def visit_Assign(self, node):
        self.visit(node.value)
        for target in node.targets:
            self.visit(target)
        self._bind_targets(node.targets, node.value)

    def _unbind(self, target):
        for sub in ast.walk(target):
            if isinstance(sub, ast.Name):
                self.table.bind_variable(sub.id, None)

    def visit_For(self, node):
        self.visit(node.iter)
        self._unbind(node.target)
        for stmt in node.body + node.orelse:
            self.visit(stmt)

    visit_AsyncFor = visit_For

    def visit_With(self, node):
        for item in node.items:
            self.visit(item.context_expr)
            if item.optional_vars is not None:
                self._unbind(item.optional_vars)
        for stmt in node.body:
            self.visit(stmt)

    visit_AsyncWith = visit_With

    def visit_AnnAssign(self, node):
        if node.value is not None:
            self.visit(node.value)
            self._bind_targets([node.target], node.value)


def resolve_call_names(tree: AstTree, aliases: ImportAliasTable | None = None) -> set[str]:
    """Fully qualified names of the calls made in a cell.

    ``aliases`` carries bindings from earlier cells and is updated with this
    cell's imports and assignments, so one table can be threaded through a
    notebook in cell order.
    """
    if tree.syntax is None:
        raise UnparseableCell("tree has no syntax attached")
    resolver = _CallResolver(aliases if aliases is not None else ImportAliasTable())
    resolver.visit(tree.syntax)
    return resolver.names


def resolve_notebook_calls(records: list[CellRecord]) -> dict[str, set[str] | None]:
    """Call names per cell id, threading one alias table through the notebook.

    Unparseable cells map to ``None``. Records must belong to one notebook and
    be in cell order.
    """
    table = ImportAliasTable()
    out: dict[str, set[str] | None] = {}
    for record in sorted(records, key=lambda r: r.cell_index):
        try:
            tree = parse_cell_ast(record.source)
        except UnparseableCell:
            out[record.cell_id] = None
            continue
        out[record.cell_id] = resolve_call_names(tree, table)
    return out


# graph construction -----------------------------------------------------------

@dataclass
class CellGraph:
    labels: list[str]
    kinds: list[NodeKind]
    adjacency: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def adjacency_with_self(self) -> np.ndarray:
        return self.adjacency | np.eye(self.n_nodes, dtype=bool)

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    def to_json(self) -> dict:
        return {
            "nodes": [{"label": lab, "kind": k.value} for lab, k in zip(self.labels, self.kinds)],
            "edges": [list(e) for e in self.edges()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CellGraph":
        labels = [n["label"] for n in obj["nodes"]]
        kinds = [NodeKind(n["kind"]) for n in obj["nodes"]]
        adj = np.zeros((len(labels), len(labels)), dtype=bool)
        for i, j in obj["edges"]:
            adj[i, j] = adj[j, i] = True
        return cls(labels, kinds, adj)


def build_cell_graph(tree: AstTree, markdown_tokens: list[str], max_nodes: int) -> CellGraph:
    """[CLS] + AST pre-order + markdown tokens, truncated to ``max_nodes``.

    Edges: AST parent/child, every markdown token to every AST node, and
    [CLS] to everything. Markdown tokens are not linked to each other.
    """
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    if tree is None or not tree.nodes:
        raise UnparseableCell("cannot build a graph for an unparseable cell")

    labels = [CLS_TOKEN] + [n.label for n in tree.nodes] + list(markdown_tokens)
    kinds = [NodeKind.CLS] + [NodeKind.AST] * len(tree.nodes) + [NodeKind.MARKDOWN] * len(markdown_tokens)
    n = min(len(labels), max_nodes)
    labels, kinds = labels[:n], kinds[:n]

    adj = np.zeros((n, n), dtype=bool)
    adj[0, 1:] = adj[1:, 0] = True
    n_ast = min(len(tree.nodes), n - 1)
    for child, par in tree.parent.items():
        i, j = child + 1, par + 1
        if i < n and j < n:
            adj[i, j] = adj[j, i] = True
    md_start = 1 + n_ast
    if md_start < n and n_ast:
        adj[md_start:n, 1:md_start] = True
        adj[1:md_start, md_start:n] = True
    return CellGraph(labels, kinds, adj)


def record_graph(record: CellRecord, max_nodes: int) -> CellGraph:
    """Graph for one cell record; raises :class:`UnparseableCell`."""
    tree = parse_cell_ast(record.source)
    return build_cell_graph(tree, tokenize_markdown(record.markdown_context), max_nodes)
