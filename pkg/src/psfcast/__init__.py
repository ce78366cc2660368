"""Panoptic segmentation forecasting at desk scale: a numpy reverse-mode
engine, difference and agent-aware attention, an autoregressive
encoder-decoder, depth-aware refinement, PQ metrics and a synthetic harness."""

__version__ = "0.1.0"
