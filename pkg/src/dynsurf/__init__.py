"""Dynamic surface reconstruction from RGB-D sequences with a deformable feature-grid SDF."""

__version__ = "0.1.0"
