"""Fine-grained, diversity-regularised Siamese tracking at desk scale."""

__version__ = "0.1.0"
