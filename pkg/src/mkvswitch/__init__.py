"""Simulation and verification toolkit for conditional McKean-Vlasov SDEs with
jumps driven by a Markovian regime-switching common noise."""

__version__ = "0.1.0"
