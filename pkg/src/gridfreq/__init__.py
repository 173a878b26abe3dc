"""Physics-inspired probabilistic model of power-grid frequency."""

__version__ = "0.1.0"
