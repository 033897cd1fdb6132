"""Contact-guided retargeting of two-person object manipulation motions."""

__version__ = "0.1.0"
