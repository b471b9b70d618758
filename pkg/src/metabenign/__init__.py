"""Minimum-norm meta learning on linear models: solvers, risks, spectra and sweeps."""
__version__ = "0.1.0"
