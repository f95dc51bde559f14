"""RF spectrum anomaly detection by next-frame prediction of spectral images."""

__version__ = "0.1.0"
