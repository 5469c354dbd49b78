"""Parametric MPC policies trained by Bayesian optimisation, policy gradients and behavioural cloning."""

__version__ = "0.1.0"
