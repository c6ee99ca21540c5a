"""ARHNet: lesion-aware augmentation and foreground harmonization for 3D brain volumes."""

__version__ = "0.1.0"
