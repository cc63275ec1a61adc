"""Desk-scale laboratory for state-space-model language modeling: hidden-state
carry between batches, length-extension measurement, memory-kernel
extrapolation, and finite-precision stability bounds."""

__version__ = "0.1.0"
