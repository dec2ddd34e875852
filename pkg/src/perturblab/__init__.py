"""Weight-perturbation laboratory for a small CNN attack detector."""

__version__ = "0.1.0"
