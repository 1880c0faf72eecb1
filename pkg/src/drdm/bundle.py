"""Bit-exact tensor bundles: a JSON manifest plus one contiguous binary blob.

A bundle directory holds ``manifest.json`` and ``data.bin``. The manifest
lists tensors as {name, dtype, shape, offset, length} entries plus optional
``meta`` (plain JSON). Blobs are little-endian, C order, offsets
non-overlapping and sequential. save/load round-trips every tensor
bit-exactly at its stored dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "data.bin"
SCHEMA = "drdm-bundle-v1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class BundleError(Exception):
    """Base class for bundle I/O failures."""


class BundleFormatError(BundleError):
    """Manifest is malformed or references an unknown dtype."""


class BundleSizeError(BundleError):
    """Blob length disagrees with the manifest."""


class TensorNotFoundError(BundleError, KeyError):
    """A requested tensor name is absent from the manifest."""


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int


def _dtype_name(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<")
    if key not in _DTYPE_NAMES:
        raise BundleFormatError(f"unsupported tensor dtype {arr.dtype}")
    return _DTYPE_NAMES[key]


def save_bundle(tensors: Mapping[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Write ``tensors`` (insertion order preserved) and optional metadata."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dt], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dt,
                "shape": list(arr.shape),
                "offset": len(blob),
                "length": len(raw),
            }
        )
        blob.extend(raw)
    manifest = {"schema": SCHEMA, "tensors": entries, "meta": meta or {}}
    (root / BLOB_NAME).write_bytes(bytes(blob))
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_manifest(path) -> tuple[list[TensorEntry], dict]:
    """Parse and validate a bundle manifest; returns (entries, meta)."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise FileNotFoundError(f"no bundle manifest at {mpath}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
        rows = doc["tensors"]
        meta = doc.get("meta", {})
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise BundleFormatError(f"malformed manifest at {mpath}: {exc}") from exc
    entries = []
    cursor = 0
    for row in rows:
        try:
            entry = TensorEntry(
                name=str(row["name"]),
                dtype=str(row["dtype"]),
                shape=tuple(int(s) for s in row["shape"]),
                offset=int(row["offset"]),
                length=int(row["length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleFormatError(f"malformed tensor entry {row!r}") from exc
        if entry.dtype not in _DTYPES:
            raise BundleFormatError(f"unknown dtype {entry.dtype!r} for tensor {entry.name}")
        expected = int(np.prod(entry.shape, dtype=np.int64)) * _DTYPES[entry.dtype].itemsize
        if expected != entry.length:
            raise BundleSizeError(
                f"tensor {entry.name}: shape {entry.shape} implies {expected} bytes, "
                f"manifest says {entry.length}"
            )
        if entry.offset != cursor:
            raise BundleFormatError(
                f"tensor {entry.name}: offsets must be sequential and non-overlapping"
            )
        cursor += entry.length
        entries.append(entry)
    return entries, meta


def load_bundle(path, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Load all tensors, or only ``names`` when given, as a name -> array dict."""
    root = Path(path)
    entries, _ = load_manifest(root)
    bpath = root / BLOB_NAME
    if not bpath.exists():
        raise FileNotFoundError(f"no bundle blob at {bpath}")
    blob = bpath.read_bytes()
    total = sum(e.length for e in entries)
    if len(blob) != total:
        raise BundleSizeError(f"blob holds {len(blob)} bytes, manifest expects {total}")
    by_name = {e.name: e for e in entries}
    if names is None:
        wanted = [e.name for e in entries]
    else:
        wanted = list(names)
        for name in wanted:
            if name not in by_name:
                raise TensorNotFoundError(f"tensor {name!r} not in bundle {root}")
    out = {}
    for name in wanted:
        e = by_name[name]
        count = int(np.prod(e.shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_DTYPES[e.dtype], count=count, offset=e.offset)
        out[name] = arr.reshape(e.shape).copy()
    return out


def load_meta(path) -> dict:
    """Load only the manifest metadata."""
    _, meta = load_manifest(path)
    return meta
