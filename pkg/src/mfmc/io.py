"""Atomic file output and the versioned JSON model envelope."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

from .errors import ValidationError

SCHEMA_VERSION = 1


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600; give the file the permissions open() would
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj: Any) -> str:
    # allow_nan=False: a NaN in a model or report is a bug, not data
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, dumps(obj))


def read_json(path: str | os.PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def envelope(kind: str, params: dict) -> dict:
    """Wrap serialized model parameters with a type tag and schema version."""
    return {"schema": f"mfmc.{kind}", "version": SCHEMA_VERSION, "params": params}


def unwrap(doc: dict, kind: str) -> dict:
    if not isinstance(doc, dict) or doc.get("schema") != f"mfmc.{kind}":
        got = doc.get("schema") if isinstance(doc, dict) else type(doc).__name__
        raise ValidationError(f"expected a mfmc.{kind} document, got {got!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported {kind} schema version {doc.get('version')!r}")
    return doc["params"]
