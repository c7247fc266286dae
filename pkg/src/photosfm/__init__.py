"""Photometric structure-from-motion with tightly coupled depth and egomotion."""

__version__ = "0.1.0"
