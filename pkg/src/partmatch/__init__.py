"""Occlusion-aware part matching: pose-guided part attention, visibility
prediction, graph-matching pseudo-labels and retrieval evaluation in numpy."""

__version__ = "0.1.0"
