"""Synthetic scenes, persistence, training, rendering and gradient checks."""
