"""Surrogate-accelerated Bayesian calibration toolkit for a stochastic epidemic ABM."""

__version__ = "0.1.0"
