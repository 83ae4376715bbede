"""BEV-to-HD-map pose estimation by decoupled and exhaustive grid matching."""

__version__ = "0.1.0"
