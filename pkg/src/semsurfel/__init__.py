"""Semantic surfel LiDAR odometry with dynamic-object filtering."""

__version__ = "0.1.0"
