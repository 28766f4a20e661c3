"""Joint architecture / bit-width search on a single-path supernet."""

__version__ = "0.1.0"
