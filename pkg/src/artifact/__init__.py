"""Structured-artifact suppression for flat-field-normalized X-ray transmission maps."""

__version__ = "0.1.0"
