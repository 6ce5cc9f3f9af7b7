"""SAR-optical cloud removal with a mask-conditioned cycle-consistent GAN."""

__version__ = "0.1.0"
