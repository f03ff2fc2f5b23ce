"""Cascaded multi-frequency-comb generation: mean field, quantum noise and entanglement."""

__version__ = "0.1.0"
