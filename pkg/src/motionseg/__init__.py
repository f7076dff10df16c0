"""Unsupervised segmentation of moving tools from optical flow, with noisy-label distillation to frame models."""

__version__ = "0.1.0"
