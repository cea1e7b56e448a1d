"""Parameter-sharing adversarial inverse RL for microscopic traffic simulation."""

__version__ = "0.1.0"
