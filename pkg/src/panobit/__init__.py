"""panobit: diffusion-based panoptic mask generation over analog bits."""

__version__ = "0.1.0"
