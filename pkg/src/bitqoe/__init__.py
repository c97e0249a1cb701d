"""Bitstream audiovisual quality modelling toolkit."""

__version__ = "0.1.0"
