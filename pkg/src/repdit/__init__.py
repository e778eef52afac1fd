"""Small diffusion transformer with a cross-layer feature cache and gated aggregation."""

__version__ = "0.1.0"
