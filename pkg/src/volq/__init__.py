"""Deep-Q classification of 3D volumes with report-derived labels."""

__version__ = "0.1.0"
