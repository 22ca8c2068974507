"""Modality-interaction audits (InterSHAP) for multimodal Cox survival models."""

__version__ = "0.1.0"
