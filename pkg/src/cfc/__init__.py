"""Coarse-to-fine open-set node classification on text-attributed graphs."""

__version__ = "0.1.0"
