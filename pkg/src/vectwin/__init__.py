"""Vehicular edge offloading simulator with per-vehicle D3QN agents and a digital twin."""

__version__ = "0.1.0"
