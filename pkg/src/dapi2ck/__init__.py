"""Synthetic CK from DAPI with a conditional GAN, then epithelium segmentation."""

__version__ = "0.1.0"
