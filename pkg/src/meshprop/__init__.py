"""Decentralized learning simulator for studying how knowledge spreads over a topology."""

__version__ = "0.1.0"
