"""Real-time symbolic accompaniment: follow a soloist against a score and play the other part."""

__version__ = "0.1"
