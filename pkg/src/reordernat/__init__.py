"""Non-autoregressive translation with an explicit reordering module."""

__version__ = "0.1.0"
