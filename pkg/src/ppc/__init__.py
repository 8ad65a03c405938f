"""Pose-conditioned iterative multi-person scene generation at desk scale."""

__version__ = "0.1.0"
