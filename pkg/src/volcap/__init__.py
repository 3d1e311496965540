"""Desk-scale volumetric capture: sliding-window non-rigid RGBD fusion
followed by implicit-function surface reconstruction, validated on
synthetic scenes with analytic ground truth."""

__version__ = "0.1.0"
