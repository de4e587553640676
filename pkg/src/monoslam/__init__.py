"""Monocular keyframe SLAM with semi-direct coarse tracking and online binary BoW loop closure."""

__version__ = "0.1.0"
