"""Auditory spatial attention decoding from EEG alpha-band scalp topography."""

__version__ = "0.1.0"
