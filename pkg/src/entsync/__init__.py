"""Two-stage clock synchronization for entanglement-based QKD links."""

__version__ = "0.1.0"
