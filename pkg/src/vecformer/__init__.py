"""Two-stage graph transformer with soft vector-quantized graph tokens."""
__version__ = "0.1.0"
