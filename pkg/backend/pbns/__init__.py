"""pbns: unsupervised pose space deformation of rigged garments."""

__version__ = "1.0.0"
