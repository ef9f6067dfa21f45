"""Minimal reverse-mode autodiff, layers and optimiser on numpy arrays."""
