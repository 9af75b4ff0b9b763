"""Simulation and finite-size security analysis for three-party decoy-state
quantum digital signatures."""

__version__ = "0.1.0"
