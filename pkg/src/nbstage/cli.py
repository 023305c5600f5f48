"""Command-line pipeline: ingest, weak-label, train, predict, eval, analyze.

Every artifact starts with a metadata header holding the tool version, the
hash of the resolved configuration and the hashes of the inputs. JSONL files
carry it as a first line ``{"_meta": ...}``, JSON reports as a ``_meta`` key,
CSV files as a leading ``#`` comment and checkpoints inside their JSON header.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from ._validation import FLOAT_WIDTH_ENV, resolve_float_width
from .analytics import (
    evaluate_against_gold,
    notebook_stage_profile,
    ordered_predictions,
    read_gold_csv,
    transition_stats,
    write_profiles_csv,
)
from .estimator import StageClassifier
from .ingest import CellRecord, IngestReport, associate_markdown, filter_and_split, load_notebooks
from .trainer import Checkpoint
from .vocab import Vocabulary
from .weak_label import REAL_STAGES, Stage, WeakLabel, label_corpus

TOOL = "nbstage"


class CliError(Exception):
    """Failure reported as a single JSON line and exit code 1."""


# configuration ----------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 4
    n_topics: int = 50
    max_nodes: int = 160
    batch_size: int = 16
    max_epochs: int = 8
    patience: int | None = 3
    learning_rate: float = 1e-5
    momentum: float = 0.9
    n_negatives: int = 5
    weak_weight: float = 0.1
    unique_stage_weight: float = 0.3
    reconstruction_weight: float = 1.0
    unique_topic_weight: float = 1.0
    normalize_hinge: bool = True
    min_count: int = 2
    validation_fraction: float = 0.1
    split_ratio: float = 0.9
    seed: int = 0
    float_width: int = 64

    @classmethod
    def resolve(cls, path: str | None, overrides: dict) -> "RunConfig":
        values = {}
        if path:
            try:
                values = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise CliError(f"cannot read config {path}: {exc}") from None
            if not isinstance(values, dict):
                raise CliError(f"config {path} must hold a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        values.setdefault("float_width", resolve_float_width(None))
        config = cls(**values)
        resolve_float_width(config.float_width)
        return config

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return _sha256(json.dumps(self.to_json(), sort_keys=True).encode())

    def estimator(self) -> StageClassifier:
        params = self.to_json()
        params["random_state"] = params.pop("seed")
        params.pop("split_ratio")
        return StageClassifier(**params)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_input(path: Path) -> str:
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode() + b"\0")
            h.update(_sha256(f.read_bytes()).encode())
        return h.hexdigest()
    return _sha256(path.read_bytes())


def make_meta(command: str, config: RunConfig, inputs: dict[str, Path], **extra) -> dict:
    meta = {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "config": config.to_json(),
        "config_hash": config.hash,
        "inputs": {name: hash_input(p) for name, p in sorted(inputs.items())},
    }
    meta.update(extra)
    return meta


# artifact io ------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, meta: dict, rows) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"_meta": meta}) + "\n")
        for row in rows:
            fh.write(_dumps(row) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "_meta" not in obj:
                rows.append(obj)
    return rows


def write_json(path, meta: dict, payload: dict) -> None:
    Path(path).write_text(
        json.dumps({"_meta": meta, **payload}, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )


def read_records(path) -> list[CellRecord]:
    try:
        return [CellRecord.from_json(obj) for obj in read_jsonl(path)]
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: not a cells file ({exc})") from None


def read_labels(path) -> list[WeakLabel]:
    try:
        return [WeakLabel.from_json(obj) for obj in read_jsonl(path)]
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: not a weak-labels file ({exc})") from None


def read_predictions(path) -> dict[str, Stage]:
    try:
        return {obj["cell_id"]: Stage[obj["predicted"]] for obj in read_jsonl(path)}
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: not a predictions file ({exc})") from None


def _status(obj: dict) -> None:
    print(_dumps(obj))


# subcommands ------------------------------------------------------------------

def cmd_ingest(args, config: RunConfig) -> None:
    report = IngestReport()
    if not Path(args.input).exists():
        raise CliError(f"input {args.input} does not exist")
    docs = load_notebooks(Path(args.input), report)
    if args.no_filter:
        selected = sorted(docs, key=lambda d: d.notebook_id)
    else:
        train_docs, val_docs = filter_and_split(docs, config.split_ratio, config.seed)
        selected = {"train": train_docs, "validation": val_docs}.get(args.split)
        if selected is None:
            selected = sorted(train_docs + val_docs, key=lambda d: d.notebook_id)
    records = [r for doc in selected for r in associate_markdown(doc)]
    meta = make_meta("ingest", config, {"input": Path(args.input)},
                     options={"split": args.split, "filter": not args.no_filter})
    n = write_jsonl(args.output, meta, (r.to_json() for r in records))
    _status({"notebooks": report.notebooks, "kept_notebooks": len(selected), "cells": n,
             "failed": report.failed, "dropped_cells": report.dropped_cells})


def cmd_weak_label(args, config: RunConfig) -> None:
    records = read_records(args.input)
    labels, coverage = label_corpus(records)
    meta = make_meta("weak-label", config, {"cells": Path(args.input)})
    write_jsonl(args.output, meta, (lab.to_json() for lab in labels))
    _status({"cells": len(labels), "covered": sum(lab.covered for lab in labels), "coverage": coverage})


def cmd_train(args, config: RunConfig) -> None:
    records = read_records(args.cells)
    labels = read_labels(args.labels)
    by_id = {lab.cell_id: lab for lab in labels}
    missing = [r.cell_id for r in records if r.cell_id not in by_id]
    if missing:
        raise CliError(f"cells without a weak label: {', '.join(missing[:10])}")
    inputs = {"cells": Path(args.cells), "labels": Path(args.labels)}
    meta = make_meta("train", config, inputs)
    log_rows = []
    estimator = config.estimator()
    try:
        estimator.fit(records, [by_id[r.cell_id] for r in records], log=log_rows.append)
    except (ValueError, RuntimeError) as exc:
        raise CliError(str(exc)) from None
    checkpoint = dataclasses.replace(estimator.checkpoint_, meta=meta)
    checkpoint.save(args.output)
    vocab_path = args.vocab or f"{args.output}.vocab.json"
    estimator.vocabulary_.save(vocab_path, meta)
    if args.log:
        write_jsonl(args.log, meta, log_rows)
    _status({"steps": len(log_rows), "epochs": len(estimator.validation_losses_),
             "best_epoch": estimator.best_epoch_, "validation_losses": estimator.validation_losses_,
             "unparseable": estimator.n_unparseable_, "vocabulary": vocab_path})


def cmd_predict(args, config: RunConfig) -> None:
    checkpoint = Checkpoint.load(args.checkpoint)
    vocab_path = args.vocab or f"{args.checkpoint}.vocab.json"
    vocabulary = Vocabulary.load(vocab_path)
    estimator = StageClassifier.from_checkpoint(checkpoint, vocabulary, float_width=config.float_width)
    records = read_records(args.cells)
    predictions, skipped = estimator.predict_stages(records)
    inputs = {"checkpoint": Path(args.checkpoint), "vocabulary": Path(vocab_path), "cells": Path(args.cells)}
    meta = make_meta("predict", config, inputs, model_config=checkpoint.model_config.to_json())
    write_jsonl(args.output, meta, (p.to_json() for p in predictions))
    _status({"cells": len(records), "predicted": len(predictions), "skipped_unparseable": skipped})


def cmd_eval(args, config: RunConfig) -> None:
    predictions = read_predictions(args.predictions)
    try:
        gold = read_gold_csv(args.gold)
    except KeyError as exc:
        raise CliError(f"{args.gold}: missing column {exc}") from None
    accuracy, confusion = evaluate_against_gold(predictions, gold)
    payload = {
        "accuracy": accuracy,
        "n_cells": int(confusion.sum()),
        "labels": [s.name for s in REAL_STAGES],
        "confusion": confusion.tolist(),
    }
    meta = make_meta("eval", config, {"predictions": Path(args.predictions), "gold": Path(args.gold)})
    write_json(args.output, meta, payload)
    _status({"accuracy": accuracy, "n_cells": payload["n_cells"]})


def _group_map(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    try:
        return {r["notebook_id"]: r["group_id"] for r in rows}
    except KeyError as exc:
        raise CliError(f"{path}: missing column {exc}") from None


def cmd_analyze(args, config: RunConfig) -> None:
    predictions = read_predictions(args.predictions)
    per_notebook = ordered_predictions(predictions)
    inputs = {"predictions": Path(args.predictions)}
    group_of = {}
    if args.groups:
        group_of = _group_map(args.groups)
        inputs["groups"] = Path(args.groups)
    weights_of = None
    if args.weight_by_lines:
        if not args.cells:
            raise CliError("--weight-by-lines needs --cells")
        inputs["cells"] = Path(args.cells)
        weights_of = {
            r.cell_id: max(1, sum(1 for ln in r.source.splitlines() if ln.strip()))
            for r in read_records(args.cells)
        }

    stages_of: dict[str, list] = {}
    weights_of_group: dict[str, list] = {}
    for cell_id in sorted(predictions, key=_cell_order):
        notebook = _cell_order(cell_id)[0]
        gid = group_of.get(notebook, notebook)
        stages_of.setdefault(gid, []).append(predictions[cell_id])
        weights_of_group.setdefault(gid, []).append(weights_of.get(cell_id, 1) if weights_of else 1)
    profiles = [
        notebook_stage_profile(stages, gid, weights_of_group[gid] if weights_of else None)
        for gid, stages in sorted(stages_of.items())
    ]

    stats = transition_stats(per_notebook.values(), bridge=not args.break_chain)
    meta = make_meta("analyze", config, inputs,
                     options={"bridge": not args.break_chain, "weight_by_lines": args.weight_by_lines})
    write_profiles_csv(args.profiles, profiles, header_comment=_dumps({"_meta": meta}))
    write_json(args.transitions, meta, {
        "labels": [s.name for s in REAL_STAGES],
        "counts": stats.counts.astype(int).tolist(),
        "matrix": stats.matrix.tolist(),
        "different_next": [None if v != v else float(v) for v in stats.different_next],
        "overall_different_next": None if stats.n_transitions == 0 else stats.overall_different_next,
        "n_transitions": stats.n_transitions,
    })
    _status({"groups": len(profiles), "undefined_groups": sum(not p.defined for p in profiles),
             "transitions": stats.n_transitions})


def _cell_order(cell_id: str):
    nb, _, idx = cell_id.rpartition(":")
    return nb, int(idx)


# entry point ------------------------------------------------------------------

class _RejectGold(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        parser.error("training accepts weak labels only; expert labels belong to `eval`")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with run configuration")
    common.add_argument("--seed", type=int, help="seed for every random choice (overrides config)")
    common.add_argument("--float-width", type=int, choices=(32, 64),
                        help=f"floating point width (default: ${FLOAT_WIDTH_ENV} or 64)")

    parser = argparse.ArgumentParser(prog=TOOL, description="Label notebook code cells with data-analysis stages.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="notebooks directory -> cells JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--split", choices=("all", "train", "validation"), default="all")
    p.add_argument("--no-filter", action="store_true", help="keep notebooks without data-library imports")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("weak-label", parents=[common], help="cells JSONL -> weak labels JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_weak_label)

    p = sub.add_parser("train", parents=[common], help="cells + weak labels -> checkpoint")
    p.add_argument("--cells", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--vocab", help="vocabulary path (default: <output>.vocab.json)")
    p.add_argument("--log", help="per-step training log JSONL")
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--gold", action=_RejectGold, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="checkpoint + cells -> predictions JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary path (default: <checkpoint>.vocab.json)")
    p.add_argument("--cells", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="predictions + gold CSV -> accuracy report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="predictions -> profiles CSV + transitions JSON")
    p.add_argument("--predictions", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--transitions", required=True)
    p.add_argument("--groups", help="CSV mapping notebook_id to group_id")
    p.add_argument("--break-chain", action="store_true", help="unlabeled cells break transition chains")
    p.add_argument("--weight-by-lines", action="store_true")
    p.add_argument("--cells", help="cells JSONL (for --weight-by-lines)")
    p.set_defaults(handler=cmd_analyze)
    return parser


OVERRIDES = ("seed", "float_width", "max_epochs", "learning_rate", "batch_size")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.resolve(args.config, {k: getattr(args, k, None) for k in OVERRIDES})
        args.handler(args, config)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(_dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " ")}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
