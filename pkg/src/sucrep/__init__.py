"""Successor representations, BYOL-gamma and goal-conditioned BC on gridworld mazes."""

__version__ = "0.1.0"
