"""Online-steerable robot motion generation on a simulated desk-scale arm."""

__version__ = "0.1.0"
