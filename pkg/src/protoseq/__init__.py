"""Few-shot emotion recognition in conversations as prototypical sequence labeling."""

__version__ = "0.1.0"
