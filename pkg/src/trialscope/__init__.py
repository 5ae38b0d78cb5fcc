"""Statistical forensics for registry-reported sequential trial results."""

__version__ = "0.1.0"
