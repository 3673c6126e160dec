"""Clustering of daily behavioral routines from mobile sensing and
personalized relapse prediction on top of the cluster scores."""

__version__ = "0.1.0"
