"""Waterway LiDAR odometry, semantic mapping and chart feature export."""

__version__ = "0.1.0"
