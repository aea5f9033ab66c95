"""Independent WPK1 container writer.

Implements the container byte layout from its public description so the
exporter has no code dependency on the primary library:

    magic "WPK1" (4 bytes)
    section count        u32 little-endian
    per section:
        name length      u16
        name             UTF-8 bytes
        kind             u8   (0 = float64 matrix, 1 = int64 vector)
        ndims            u8
        dims             ndims * u64
        payload          row-major float64 / int64, little-endian

A feature table named ``name`` is stored as the pair ``name/features``
(kind 0) + ``name/labels`` (kind 1); a weight matrix as ``name/rows`` +
``name/class_ids``.  Sections are written in insertion order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"WPK1"
KIND_FLOAT = 0
KIND_INT = 1


def _encode_section(name: str, arr: np.ndarray) -> bytes:
    if np.issubdtype(arr.dtype, np.floating):
        data = np.ascontiguousarray(arr, dtype="<f8")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"section {name!r} contains non-finite entries")
        kind = KIND_FLOAT
    elif np.issubdtype(arr.dtype, np.integer):
        data = np.ascontiguousarray(arr, dtype="<i8")
        kind = KIND_INT
    else:
        raise ValueError(f"section {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    return (
        struct.pack("<H", len(encoded))
        + encoded
        + struct.pack("<BB", kind, data.ndim)
        + struct.pack(f"<{data.ndim}Q", *data.shape)
        + data.tobytes(order="C")
    )


def container_bytes(sections: dict[str, np.ndarray]) -> bytes:
    blobs = [_encode_section(name, arr) for name, arr in sections.items()]
    return MAGIC + struct.pack("<I", len(blobs)) + b"".join(blobs)


def write_container(path, sections: dict[str, np.ndarray]) -> None:
    """Atomically write sections to ``path`` (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = container_bytes(sections)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
