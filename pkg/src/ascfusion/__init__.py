"""Acoustic scene classification with a log-mel CNN, a feature GBM and late fusion."""

__version__ = "0.1.0"

SAMPLE_RATE = 44100
N_CLASSES = 15
N_SEGMENTS = 7
