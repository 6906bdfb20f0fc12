"""Exit-rate laboratory for degenerate chain diffusions."""

__version__ = "0.1.0"
