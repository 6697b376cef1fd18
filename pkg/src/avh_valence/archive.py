"""Single-file tensor archive used for weights, diary stacks, features, checkpoints.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then one raw little-endian blob. The manifest lists
``{name, dtype "f32", shape, byte_offset, byte_length}`` per tensor
(offsets relative to the blob start, entries row-major) plus free-form
``meta``. Manifest JSON is emitted with sorted keys and fixed separators so
identical content is byte-identical on disk.

The writer dedups identical tensor payloads: entries may share a blob range,
which readers never notice (they only follow offset/length).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"TNSRARC1"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")  # the format stores f32 only


class ArchiveError(ValueError):
    """Raised for malformed archives or missing/mismatched tensors."""


def write_archive(path, tensors, meta=None) -> None:
    """Write named float32 tensors plus a metadata dict to `path`.

    `tensors` is a dict or iterable of (name, array) pairs; arrays are cast
    to little-endian float32 and stored C-contiguous. Identical payloads are
    stored once.
    """
    if isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = list(tensors)

    blob_parts: list[bytes] = []
    offsets_by_digest: dict[bytes, tuple[int, int]] = {}
    entries = []
    cursor = 0
    for name, arr in items:
        if not isinstance(name, str) or not name:
            raise ArchiveError(f"tensor name must be a nonempty string, got {name!r}")
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE)
        payload = a.tobytes()
        digest = hashlib.sha256(payload).digest()
        if digest in offsets_by_digest:
            offset, length = offsets_by_digest[digest]
        else:
            offset, length = cursor, len(payload)
            offsets_by_digest[digest] = (offset, length)
            blob_parts.append(payload)
            cursor += length
        entries.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": [int(s) for s in a.shape],
                "byte_offset": offset,
                "byte_length": length,
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta if meta is not None else {},
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest_bytes).to_bytes(8, "little"))
        fh.write(manifest_bytes)
        for part in blob_parts:
            fh.write(part)


class Archive:
    """Materialized archive: `tensors` maps name -> float32 ndarray; `meta` is the manifest metadata."""

    def __init__(self, tensors: dict[str, np.ndarray], meta: dict):
        self.tensors = tensors
        self.meta = meta

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name) -> np.ndarray:
        if name not in self.tensors:
            raise ArchiveError(f"archive has no tensor named {name!r}")
        return self.tensors[name]

    def names(self):
        return list(self.tensors)


def read_archive(path) -> Archive:
    """Read an archive, materializing every tensor. Raises ArchiveError on corruption."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    manifest_len = int.from_bytes(data[8:16], "little")
    if 16 + manifest_len > len(data):
        raise ArchiveError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")

    blob = data[16 + manifest_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise ArchiveError(f"{path}: tensor {name!r} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["byte_offset"]), int(entry["byte_length"])
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if length != expected:
            raise ArchiveError(
                f"{path}: tensor {name!r} byte_length {length} does not match shape {shape}"
            )
        if offset < 0 or offset + length > len(blob):
            raise ArchiveError(f"{path}: tensor {name!r} byte range exceeds blob")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=length // _DTYPE.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    return Archive(tensors, manifest.get("meta", {}))


def check_shapes(archive: Archive, expected: dict[str, tuple[int, ...]]) -> None:
    """Verify every expected tensor exists with its exact shape.

    Raises ArchiveError naming the first missing tensor or the first shape
    mismatch (expected vs actual).
    """
    for name, shape in expected.items():
        if name not in archive.tensors:
            raise ArchiveError(f"missing tensor {name!r}")
        actual = archive.tensors[name].shape
        if tuple(actual) != tuple(shape):
            raise ArchiveError(
                f"tensor {name!r} has shape {tuple(actual)}, expected {tuple(shape)}"
            )
