"""Joint object / phrase / region-caption scene graph generation on synthetic scenes."""

__version__ = "0.1.0"
