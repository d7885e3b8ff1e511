"""Versioned JSON checkpoint container.

Arrays are stored as nested lists (row-major). Floats go through ``repr`` so a
save/load round trip is exact and identical runs produce identical bytes.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

FORMAT = "bundleflow-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(kind, payload, meta=None):
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta or {},
           "payload": payload}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save(path, kind, payload, meta=None):
    """Atomic write: a temp file is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(kind, payload, meta))
    os.replace(tmp, path)
    return path


def load(path, kind=None):
    """Returns ``(payload, meta)``; raises FileNotFoundError or CheckpointError."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({e})") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc["payload"], doc.get("meta", {})


def peek_kind(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return json.loads(path.read_text()).get("kind")
    except (json.JSONDecodeError, AttributeError) as e:
        raise CheckpointError(f"{path}: not a JSON checkpoint") from e
