"""Video frame extrapolation and interpolation with convolutional
self-attention, built on a small numpy autograd core."""

__version__ = "0.1.0"
