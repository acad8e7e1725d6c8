"""Text-image translation with a shared multimodal codebook, trained in stages."""

__version__ = "0.1.0"
