"""Long-tail trajectory prediction with future-enhanced contrastive learning and a hyper decoder."""

__version__ = "0.1.0"
