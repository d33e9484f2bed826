"""TCNet: explicit time-series feature anchors with context-conditioned correction."""

__version__ = "0.1.0"
