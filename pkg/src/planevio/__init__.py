"""Plane-aided LiDAR-visual-inertial odometry and its synthetic test harness."""

__version__ = "0.1.0"
