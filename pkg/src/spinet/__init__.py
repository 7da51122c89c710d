"""Spectral inference networks: learning ordered eigenfunctions with stochastic optimization."""

__version__ = "0.1.0"
