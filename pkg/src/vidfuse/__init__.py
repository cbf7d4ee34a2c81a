"""Toy multi-condition video editing with a micro MM-DiT trained by flow matching."""

__version__ = "0.1.0"
