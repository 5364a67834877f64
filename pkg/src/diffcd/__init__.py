"""Diffusion-feature change detection with flow dual-alignment fusion."""

__version__ = "0.1.0"
