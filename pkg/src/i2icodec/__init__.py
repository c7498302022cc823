"""Unified learned image codec with an autoencoding mode and a style-controllable translation mode."""
from .networks import Mode, NetConfig
from .model import Model
from .codec import Codec

__all__ = ["Codec", "Mode", "Model", "NetConfig"]
__version__ = "0.1.0"
