"""Memory-conditioned knowledge insertion engine and evaluation harness."""

__version__ = "0.1.0"
