"""Sliding-window tiling, overlap-summed stitching and Dice evaluation for
whole-slide glomerulus segmentation."""

__version__ = "0.1.0"
