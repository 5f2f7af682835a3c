"""Ambient-data model identification and modal-LQR wide-area damping control."""

__version__ = "0.1.0"
