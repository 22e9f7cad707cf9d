"""
bloch-kam: semiclassical laboratory for particles in periodic potentials

This package computes Bloch band spectra, classical asymptotic velocities,
KAM tori and WKB quasimodes, and compares quantum group-velocity distributions
with the classical energy-velocity measure.
"""

__version__ = "0.1.0"
__author__ = "bloch-kam developers"
__description__ = "Semiclassical lab for Bloch bands, KAM tori and quasimodes"
