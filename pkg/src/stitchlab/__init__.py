"""Desk-scale model stitching: numpy CNN kernels, stitching penalties and linear CKA."""

__version__ = "0.1.0"
