"""Sound event detection with duration-robust training losses."""

__version__ = "0.1.0"
