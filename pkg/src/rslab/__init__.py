"""Numerical laboratory for almost-supermartingale recursions, skeleton-timescale
stochastic approximation with iterate-dependent Markovian noise, and linear
Q-learning with an adaptive-temperature epsilon-softmax behavior policy."""

__version__ = "0.1.0"
