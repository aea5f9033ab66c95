"""Binary container for feature tables, weight matrices, and raw arrays.

On-disk layout (all integers little-endian):

    magic "WPK1" (4 bytes)
    section count        u32
    per section:
        name length      u16
        name             UTF-8 bytes
        kind             u8   (0 = float64 matrix, 1 = int64 vector)
        ndims            u8
        dims             ndims * u64
        payload          row-major float64 / int64, little-endian

High-level objects expand into named sections: a :class:`~wpk.data.FeatureTable`
stored under ``name`` becomes ``name/features`` (kind 0) plus ``name/labels``
(kind 1); a :class:`~wpk.data.WeightMatrix` becomes ``name/rows`` plus
``name/class_ids``.  Bare float/int arrays map to single sections.  The format
is self-contained so other tools can write it without this library.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FeatureTable, WeightMatrix
from .exceptions import WpkError

MAGIC = b"WPK1"
KIND_FLOAT = 0
KIND_INT = 1

# Hard cap on elements per section; dims beyond this are treated as corruption.
MAX_ELEMENTS = 1 << 40

FEATURES_SUFFIX = "/features"
LABELS_SUFFIX = "/labels"
ROWS_SUFFIX = "/rows"
CLASS_IDS_SUFFIX = "/class_ids"


class ContainerError(WpkError):
    """Malformed or unwritable container; ``code`` identifies the failure.

    Codes: ``bad-magic``, ``truncated``, ``dim-overflow``, ``bad-section``,
    ``non-finite``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _flatten(tables: Mapping[str, object]) -> dict[str, np.ndarray]:
    sections: dict[str, np.ndarray] = {}
    for name, obj in tables.items():
        if isinstance(obj, FeatureTable):
            sections[name + FEATURES_SUFFIX] = obj.features
            sections[name + LABELS_SUFFIX] = obj.labels
        elif isinstance(obj, WeightMatrix):
            sections[name + ROWS_SUFFIX] = obj.rows
            sections[name + CLASS_IDS_SUFFIX] = obj.class_ids
        else:
            sections[name] = np.asarray(obj)
    return sections


def save_container(path, tables: Mapping[str, object]) -> None:
    """Write named tables/arrays to ``path``.

    ``tables`` maps names to FeatureTable, WeightMatrix, or numpy arrays
    (float arrays become kind-0 sections, integer arrays kind-1 vectors).
    Non-finite float entries are rejected with the offending name.
    """
    sections = _flatten(tables)
    blobs = []
    for name, arr in sections.items():
        if np.issubdtype(arr.dtype, np.floating):
            data = np.ascontiguousarray(arr, dtype="<f8")
            if not np.all(np.isfinite(data)):
                raise ContainerError(
                    "non-finite", f"table {name!r} contains non-finite entries"
                )
            kind = KIND_FLOAT
        elif np.issubdtype(arr.dtype, np.integer):
            data = np.ascontiguousarray(arr, dtype="<i8")
            kind = KIND_INT
        else:
            raise ContainerError("bad-section", f"unsupported dtype for {name!r}")
        encoded = name.encode("utf-8")
        header = struct.pack("<H", len(encoded)) + encoded
        header += struct.pack("<BB", kind, data.ndim)
        header += struct.pack(f"<{data.ndim}Q", *data.shape)
        blobs.append(header + data.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContainerError("truncated", "container payload is truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_sections(path) -> dict[str, np.ndarray]:
    """Read the raw named sections of a container file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw)
    if rd.take(4) != MAGIC:
        raise ContainerError("bad-magic", f"{path}: not a WPK1 container")
    (count,) = struct.unpack("<I", rd.take(4))
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", rd.take(2))
        name = rd.take(name_len).decode("utf-8")
        kind, ndims = struct.unpack("<BB", rd.take(2))
        dims = struct.unpack(f"<{ndims}Q", rd.take(8 * ndims))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem > MAX_ELEMENTS:
            raise ContainerError(
                "dim-overflow", f"section {name!r} declares {n_elem} elements"
            )
        if kind == KIND_FLOAT:
            dtype = np.dtype("<f8")
        elif kind == KIND_INT:
            dtype = np.dtype("<i8")
        else:
            raise ContainerError("bad-section", f"section {name!r} has kind {kind}")
        payload = rd.take(n_elem * 8)
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        sections[name] = arr
    return sections


def load_container(path) -> dict[str, object]:
    """Load a container, reassembling FeatureTable/WeightMatrix pairs."""
    sections = load_sections(path)
    out: dict[str, object] = {}
    consumed: set[str] = set()
    for name in sections:
        if name.endswith(FEATURES_SUFFIX):
            base = name[: -len(FEATURES_SUFFIX)]
            labels_name = base + LABELS_SUFFIX
            if labels_name in sections:
                out[base] = FeatureTable(sections[name], sections[labels_name])
                consumed.update((name, labels_name))
        elif name.endswith(ROWS_SUFFIX):
            base = name[: -len(ROWS_SUFFIX)]
            ids_name = base + CLASS_IDS_SUFFIX
            if ids_name in sections:
                out[base] = WeightMatrix(sections[name], sections[ids_name])
                consumed.update((name, ids_name))
    for name, arr in sections.items():
        if name not in consumed:
            out[name] = arr
    return out


def load_csv(path) -> FeatureTable:
    """Import a hand-made fixture CSV with header ``label,f0,f1,...``."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[0] != "label" or any(
            c != f"f{i}" for i, c in enumerate(cols[1:])
        ):
            raise ContainerError(
                "bad-section", f"{path}: expected header 'label,f0,f1,...', got {header!r}"
            )
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape[1] != len(cols):
        raise ContainerError("bad-section", f"{path}: row width does not match header")
    labels = body[:, 0]
    if not np.all(labels == np.round(labels)):
        raise ContainerError("bad-section", f"{path}: non-integer labels")
    return FeatureTable(body[:, 1:], labels.astype(np.int64))
