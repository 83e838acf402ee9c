"""3-D volume harmonization by content/style disentanglement."""

__version__ = "0.1.0"
