"""Offline LiDAR-visual dynamic obstacle detection and tracking."""

__version__ = "0.1.0"
