"""Streaming deskew and live shear-warp viewing for oblique lightsheet stacks."""

__version__ = "0.1.0"

from .geometry import SheetGeometry, ViewTransform, view_transform  # noqa: F401
