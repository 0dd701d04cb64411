"""Online unsupervised cross-domain adaptation with self-evolving heads."""

__version__ = "0.1.0"
