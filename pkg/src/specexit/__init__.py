"""Lossless speculative decoding with an early-exit draft path and
Thompson-sampling control of the draft length."""

__version__ = "0.1.0"
