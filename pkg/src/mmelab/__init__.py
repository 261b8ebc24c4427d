"""Minimax-entropy semi-supervised domain adaptation on synthetic shift tasks."""

__version__ = "0.1.0"
