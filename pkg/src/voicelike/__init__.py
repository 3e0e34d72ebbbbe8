"""Voice likability prediction and likability-controlled unit-based voice conversion."""

__version__ = "0.1.0"
