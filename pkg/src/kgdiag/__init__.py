"""Knowledge-graph-enhanced multi-label diagnosis prediction."""

__version__ = "0.1.0"
