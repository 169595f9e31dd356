"""
Model and checkpoint files: a JSON header plus a little-endian float64 blob
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from backend.errors import DataError, IntegrityError, ParseError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    tensors: Dict[str, np.ndarray]
    hyper: Dict[str, Any]
    extra: Dict[str, Any]
    digest: str


def _stem(path: os.PathLike) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def tensors_digest(tensors: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: os.PathLike,
    kind: str,
    tensors: Dict[str, np.ndarray],
    hyper: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the header path."""
    stem = _stem(path)
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        table = []
        offset = 0
        with open(stem.with_suffix(".bin"), "wb") as blob:
            for name in sorted(tensors):
                data = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
                blob.write(data)
                table.append(
                    {"name": name, "shape": list(np.shape(tensors[name])), "offset": offset, "length": len(data)}
                )
                offset += len(data)
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": kind,
            "hyper": hyper or {},
            "extra": extra or {},
            "tensors": table,
            "digest": tensors_digest(tensors),
        }
        with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(header, f, sort_keys=True, indent=2)
        logger.info(f"Saved {kind} checkpoint: {stem}")
        return stem.with_suffix(".json")
    except Exception as e:
        logger.error(f"Error saving checkpoint {stem}: {e}")
        raise


def load_checkpoint(path: os.PathLike, expected_kind: Optional[str] = None) -> Checkpoint:
    stem = _stem(path)
    header_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not header_path.exists() or not blob_path.exists():
        raise DataError(f"checkpoint not found: {stem}")
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"corrupt checkpoint header {header_path}: {e}", e.lineno) from e
    if expected_kind and header.get("kind") != expected_kind:
        raise DataError(f"{header_path} holds a '{header.get('kind')}', expected '{expected_kind}'")
    with open(blob_path, "rb") as f:
        blob = f.read()
    tensors = {}
    for entry in header["tensors"]:
        offset, length = entry["offset"], entry["length"]
        shape = tuple(entry["shape"])
        if length != int(np.prod(shape)) * 8 or offset + length > len(blob):
            raise IntegrityError(f"tensor {entry['name']} in {blob_path} is truncated")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=length // 8, offset=offset).reshape(shape).astype(np.float64)
        )
    digest = tensors_digest(tensors)
    if digest != header["digest"]:
        raise IntegrityError(f"digest mismatch for {stem}")
    return Checkpoint(
        kind=header["kind"],
        tensors=tensors,
        hyper=header.get("hyper", {}),
        extra=header.get("extra", {}),
        digest=digest,
    )


def write_jsonl(path: os.PathLike, rows, append: bool = False) -> Path:
    """Write one JSON object per line with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path: os.PathLike):
    path = Path(path)
    if not path.exists():
        raise DataError(f"log not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: {e}", line_number) from e
    return rows
