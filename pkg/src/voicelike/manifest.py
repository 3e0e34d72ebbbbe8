"""JSON Lines corpus manifests.

One object per line::

    {"id": ..., "audio": path, "split": "train"|"val"|"test",
     "ratings": [4 floats] | null, "speaker": ..., "text"?: str,
     "features"?: path, "embedding"?: path}

Annotation adds ``ratings_pred`` (and ``ratings_orig`` when ratings existed).
Relative paths are resolved against the manifest's directory on read.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import DataError

SPLITS = ("train", "val", "test")
PATH_FIELDS = ("audio", "features", "embedding")


def validate_record(rec: dict, where="record") -> dict:
    if not isinstance(rec, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("id", "split"):
        if key not in rec:
            raise DataError(f"{where}: missing field {key!r}")
    if rec["split"] not in SPLITS:
        raise DataError(f"{where}: split must be one of {SPLITS}, got {rec['split']!r}")
    ratings = rec.get("ratings")
    if ratings is not None:
        if not isinstance(ratings, list) or len(ratings) != 4:
            raise DataError(f"{where}: ratings must be null or a list of 4 numbers")
        rec["ratings"] = [float(v) for v in ratings]
    return rec


def iter_manifest(path):
    """Stream validated records one at a time."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.resolve().parent
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            rec = validate_record(rec, f"{path}:{lineno}")
            for key in PATH_FIELDS:
                if rec.get(key) and not Path(rec[key]).is_absolute():
                    rec[key] = str(base / rec[key])
            yield rec


def read_manifest(path) -> list[dict]:
    return list(iter_manifest(path))


def write_manifest(path, records) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def split(records, name) -> list[dict]:
    return [r for r in records if r["split"] == name]
