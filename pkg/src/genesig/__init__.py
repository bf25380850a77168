"""Graph-convolutional gene signature selection for expression cohorts."""

__version__ = "0.1.0"
