"""Split-and-recombine 2D-to-3D pose lifting networks on a small numpy autodiff engine."""

__version__ = "0.1.0"
