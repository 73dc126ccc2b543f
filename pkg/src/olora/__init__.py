"""Task-free online continual learning with incremental low-rank adapters."""

__version__ = "0.1.0"
