"""Additive noise models, change localisation and shift adaptation for cause-effect pairs."""

__version__ = "0.1.0"
