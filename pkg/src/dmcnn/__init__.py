"""Dual-domain multi-scale CNN for JPEG artifact removal, with its own autodiff engine."""
__version__ = "0.1.0"
