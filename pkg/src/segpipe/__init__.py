"""Segmentation pipeline engine: task conversion, planning, preprocessing,
training, sliding-window inference and evaluation for 2D/3D medical images."""
from __future__ import annotations

__version__ = "0.1.0"
