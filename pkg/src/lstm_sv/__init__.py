"""Text-independent speaker verification with LSTM d-vectors and a GMM-UBM baseline."""

__version__ = "0.1.0"
