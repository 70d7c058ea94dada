"""Identity-preserving face anonymization with key-gated reversible hiding."""

__version__ = "0.1.0"
