"""Feature/weight exporter producing WPK1 containers for the k-shot toolkit.

This package is intentionally independent of the ``wpk`` library: it talks to
the primary component only through the on-disk container format, which it
implements from the documented byte layout (see :mod:`wpk_export.writer`).
"""

from .extract import ExportError, ExportManifest, export_features, extract
from .writer import write_container

__all__ = [
    "ExportError",
    "ExportManifest",
    "export_features",
    "extract",
    "write_container",
]
