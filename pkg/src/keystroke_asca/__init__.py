"""Acoustic side-channel keystroke classification: isolation, mel features, a
convolution + attention classifier trained from scratch, and attack metrics."""

from .estimators import KeystrokeClassifier, KeystrokeIsolator, MelSpectrogramTransformer

__version__ = "0.1.0"

__all__ = ["KeystrokeClassifier", "KeystrokeIsolator", "MelSpectrogramTransformer", "__version__"]
