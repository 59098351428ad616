"""Learned adaptive sampling for RRT*: obstacle autoencoder, stochastic deep sampler, planners."""

__version__ = "0.1.0"
