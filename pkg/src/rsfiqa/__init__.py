"""Region-guided no-reference image quality assessment at desk scale."""

__version__ = "0.1.0"
