"""Self-describing JSON containers for all on-disk artifacts.

Every file this package reads or writes is a single JSON object with a
``format`` tag, a ``format_version`` and a set of named fields. Numeric
arrays are embedded as ``{"shape": [...], "dtype": "...", "data": <base64>}``
with the raw bytes stored little-endian. Small integer lists (kinematic
parents, part memberships) stay as plain JSON.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class FileFormatError(ValueError):
    """Raised when a container file fails to parse or declares the wrong format."""


def encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        name = "float64"
    elif arr.dtype == np.float32:
        name = "float32"
    elif np.issubdtype(arr.dtype, np.integer):
        name = "int64"
        arr = arr.astype(np.int64)
    else:
        raise FileFormatError(f"unsupported array dtype {arr.dtype}")
    data = np.ascontiguousarray(arr.astype(_DTYPES[name])).tobytes()
    return {
        "shape": list(arr.shape),
        "dtype": name,
        "data": base64.b64encode(data).decode("ascii"),
    }


def decode_array(obj: dict, field: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        dtype = _DTYPES[obj["dtype"]]
        raw = base64.b64decode(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"field '{field}' is not a valid encoded array: {exc}") from exc
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise FileFormatError(
            f"field '{field}': payload has {arr.size} elements, shape {shape} expects "
            f"{int(np.prod(shape, dtype=np.int64))}"
        )
    # native byte order, writable copy
    return arr.reshape(shape).astype(dtype[1:], copy=True)


def write_container(path: str | Path, fmt: str, fields: dict, version: int = 1) -> None:
    doc = {"format": fmt, "format_version": version}
    doc.update(fields)
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def read_container(path: str | Path, fmt: str | None = None) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise FileFormatError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "format" not in doc:
        raise FileFormatError(f"{path}: missing 'format' tag")
    if fmt is not None and doc["format"] != fmt:
        raise FileFormatError(f"{path}: expected format '{fmt}', found '{doc['format']}'")
    return doc


def sha256_of_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
