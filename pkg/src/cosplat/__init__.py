"""CPU differentiable Gaussian splatting with co-adaptation measurement and suppression."""

__version__ = "0.1.0"
