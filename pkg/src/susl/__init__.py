"""Semi-unsupervised learning with SSVAE and GM-DGM models on a small numpy autodiff core."""

__version__ = "0.1.0"
