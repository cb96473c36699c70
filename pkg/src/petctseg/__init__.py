"""Dual-channel PET/CT lesion segmentation with sample-attention boosting."""

__version__ = "0.1.0"
