"""Pipe inventory from photogrammetric point clouds.

Subpackages cover frame selection from video, metric scale from circular
targets, cylinder detection through a seed plane, pipe classification and
progress reporting, plus synthetic data for testing all of it.
"""

from __future__ import annotations

from importlib import metadata as _metadata

from .errors import PipefitError

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0.0.0"

__all__ = ["PipefitError", "__version__"]
