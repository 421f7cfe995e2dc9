"""Atypical-speech TTS augmentation toolkit at desk scale."""

__version__ = "0.1.0"
