"""Domain-incremental continual-learning benchmark harness for
multichannel clinical-style time series."""

__version__ = "0.1.0"
