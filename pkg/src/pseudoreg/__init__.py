"""Dense forest-parameter regression from SAR features with pseudo-targets
and sparse field plots: target rasterisation, dataset building, U-Net /
cGAN training with masked and spectral losses, and blended inference."""

__version__ = "0.1.0"
