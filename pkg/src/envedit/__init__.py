"""Environment-editing data augmentation for instruction-following navigation."""

__version__ = "0.1.0"
