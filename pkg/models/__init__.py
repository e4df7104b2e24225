"""Simulation models for cellular underwater optical CDMA networks."""
