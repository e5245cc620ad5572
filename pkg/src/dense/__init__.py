"""Longitudinal SOAP progress-note generation from heterogeneous clinical notes."""

__version__ = "0.1.0"
