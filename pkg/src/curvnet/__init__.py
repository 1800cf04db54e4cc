"""Level-set curvature toolkit: finite-difference baseline, circle datasets,
numpy regression networks and flower-interface experiments."""

__version__ = "0.1.0"
