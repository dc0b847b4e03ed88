"""Autoencoder-based communication over a learned Gaussian mixture channel,
with few-shot adaptation of the channel model and decoder to distribution
shift."""

from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
