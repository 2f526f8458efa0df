"""Perception-based robust control: learned virtual sensors with data-dependent
error bounds, safe-set estimation, and L1/H2 controller synthesis over
finite-horizon closed-loop responses."""

__version__ = "0.1.0"
