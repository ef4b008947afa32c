"""Text-guided transformer motion tokenization at desk scale."""

__version__ = "0.1.0"
