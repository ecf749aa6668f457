"""Offline bridge: CNN feature maps and VLAD models in engine file formats."""

__version__ = "0.1.0"
