"""Viscoelastic wave propagation with first and second parameter derivatives and their adjoints."""

__version__ = "0.1.0"
