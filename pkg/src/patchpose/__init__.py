"""Self-supervised scale and orientation histograms for image patches."""

__version__ = "0.1.0"
