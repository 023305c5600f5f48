"""Rebuild ``tests/data/public_cells.jsonl.gz`` from notebooks shipped in PyPI source archives.

Every archive is pinned by version and SHA-256 digest. Notebooks go through
the same ingest path as the CLI: unreadable files are skipped, the
data-library filter is applied, markdown is associated, and the code cells are written as gzipped JSON lines (mtime 0, sorted), so a
rebuild from the same archives is byte-identical.

    python scripts/build_public_sample.py --cache ~/.cache/nbstage-sdists
"""
from __future__ import annotations

import argparse
import gzip
import hashlib
import io
import json
import sys
import tarfile
import urllib.request
import zipfile
from pathlib import Path

from nbstage.ingest import NotebookError, associate_markdown, parse_notebook, uses_data_library

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_OUTPUT = ROOT / "tests" / "data" / "public_cells.jsonl.gz"

# distribution, version, archive, SHA-256 of the archive, licence
SOURCES = [
    ("sktime", "1.2.0", "sktime-1.2.0.tar.gz",
     "641425178b3215a0a8dbcf4e6948a8b589e46def39c91989f71d9fa297bc3709", "BSD-3-Clause"),
    ("statsmodels", "0.15.0", "statsmodels-0.15.0.tar.gz",
     "5d257fe58d0772bc46a557880ca78e2a8e07fec7bfd9d11074aef8e33e1aecbc", "BSD-3-Clause"),
    ("bambi", "0.21.0", "bambi-0.21.0.tar.gz",
     "68c096406d9426c2d244512b373c2f3b0123a553faf22ddf500b2a2400b60e85", "MIT"),
    ("dowhy", "0.14", "dowhy-0.14.tar.gz",
     "18f48882bc2cd3452ed3536ae3529a196acfa3b1e21b8978b71934e65cabb665", "MIT"),
    ("hvplot", "0.12.2", "hvplot-0.12.2.tar.gz",
     "9e29bbe65f94937d4eeaeccf33566540df936c8f9aeadfa12ea9f306d5237938", "BSD-3-Clause"),
    ("holoviews", "1.23.2", "holoviews-1.23.2.tar.gz",
     "e0c511e6d4db4f370f2550d363c23b70d7ee4f2310f1c7995b0f89cacf1eb107", "BSD-3-Clause"),
    ("imbalanced-learn", "0.14.2", "imbalanced_learn-0.14.2.tar.gz",
     "f80ce7eafbcece8686e32571bd12978546c729c3f277215bead61a906ce9afe4", "MIT"),
    ("tsfresh", "0.21.2", "tsfresh-0.21.2.tar.gz",
     "a960f474498da07f5ed9992f2054db1d7483e224fdf91d89c28535c3af5cb17d", "MIT"),
    ("datashader", "0.19.1", "datashader-0.19.1.tar.gz",
     "f62d880a4a431813f9bb3959e565feda79c1634f889aaadcf948cb0d0c114cdd", "BSD-3-Clause"),
    ("esda", "2.10.0", "esda-2.10.0.tar.gz",
     "2dad5b73d8408bc2fe5fff95524a38b98552e09cc494df5010649f8f12019ea5", "BSD-3-Clause"),
    ("scikit-survival", "0.28.0", "scikit_survival-0.28.0.tar.gz",
     "f8903bf9b67bf9040c7a8b639d300b0817d9e208c8fd7bf34cc624dcc71d32ee", "GPL-3.0-or-later"),
    ("yellowbrick", "1.5", "yellowbrick-1.5.tar.gz",
     "99a6336dd2e7ce586a8cde67966b79c51b479d3759f3c083d7e19ffe949f6076", "Apache-2.0"),
    ("libpysal", "4.15.0", "libpysal-4.15.0.tar.gz",
     "db9eee1579678a2eec6974c831dc93abf612a4df5a3c45e9d7ed35ea5f9e2497", "BSD-3-Clause"),
    ("geoviews", "1.15.1", "geoviews-1.15.1.tar.gz",
     "c72097ef4f24895c46f95834e5c19ac185ea1c34fd610f0f956421ba515d4aad", "BSD-3-Clause"),
    ("pmdarima", "2.1.1", "pmdarima-2.1.1.tar.gz",
     "b8d2a0c0cd3f7ec90825fa25a917b5f66073de58033511de015a9e76e4e3d8f7", "MIT"),
    ("pointpats", "2.6.0", "pointpats-2.6.0.tar.gz",
     "6c21e0a03d9ad4ca0f62393f888842212580d99b828b4b68ddeb1929eac8bdf2", "BSD-3-Clause"),
    ("spaghetti", "1.7.6", "spaghetti-1.7.6.tar.gz",
     "c9beddbb3bf285e88745d36aee886c78ac6e6a416f0f9b1a441265c8c08f923d", "BSD-3-Clause"),
    ("scikit-surprise", "1.1.5", "scikit_surprise-1.1.5.tar.gz",
     "371ac455b06fa6c996960863bfedfe8ec3cd03e670c066f862d20c9de70a413d", "BSD-3-Clause"),
    ("gluonts", "0.17.0", "gluonts-0.17.0.tar.gz",
     "f815d4a069be974a2a62c0eb7409a0b6c5c58fd960b562ba2a530fc2d5763c7e", "Apache-2.0"),
]
SOURCE_URL = "https://files.pythonhosted.org/packages/source/{initial}/{name}/{filename}"


def fetch(name: str, filename: str, sha256: str, cache: Path | None) -> bytes:
    path = cache / filename if cache else None
    if path is not None and path.exists():
        blob = path.read_bytes()
    else:
        url = SOURCE_URL.format(initial=name[0], name=name, filename=filename)
        with urllib.request.urlopen(url, timeout=600) as resp:
            blob = resp.read()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    if digest != sha256:
        raise RuntimeError(f"{filename}: sha256 {digest}, expected {sha256}")
    return blob


def notebooks_in(filename: str, blob: bytes):
    """(member path, bytes) for every notebook in a source archive."""
    def wanted(name: str) -> bool:
        return name.endswith(".ipynb") and ".ipynb_checkpoints" not in name

    if filename.endswith(".zip"):
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            for name in sorted(zf.namelist()):
                if wanted(name):
                    yield name, zf.read(name)
        return
    with tarfile.open(fileobj=io.BytesIO(blob)) as tf:
        members = sorted((m for m in tf.getmembers() if m.isfile() and wanted(m.name)), key=lambda m: m.name)
        for m in members:
            yield m.name, tf.extractfile(m).read()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--output", type=Path, default=DEFAULT_OUTPUT)
    parser.add_argument("--cache", type=Path, help="directory for downloaded archives")
    args = parser.parse_args(argv)

    records, manifest = [], []
    for name, version, filename, sha256, licence in SOURCES:
        blob = fetch(name, filename, sha256, args.cache)
        kept = cells = 0
        for member, raw in notebooks_in(filename, blob):
            try:
                doc = parse_notebook(raw, member)
            except (NotebookError, UnicodeDecodeError):
                continue
            if not uses_data_library(doc):
                continue
            found = associate_markdown(doc)
            records.extend(found)
            kept += 1
            cells += len(found)
        manifest.append({"distribution": name, "version": version, "license": licence,
                         "sdist": filename, "sha256": sha256, "notebooks": kept, "cells": cells})
        print(f"{name}=={version}: {kept} notebooks, {cells} cells", file=sys.stderr)

    records.sort(key=lambda r: (r.notebook_id, r.cell_index))
    args.output.parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "wb") as raw_fh:
        with gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as gz:
            for r in records:
                gz.write((json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n").encode())
    manifest_path = args.output.with_name("public_cells.sources.json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{len(records)} cells written to {args.output}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
