"""Simulation of single-photon-scale ac Stark control of rare-earth ion ensembles in a nanocavity."""

__version__ = "0.1.0"
