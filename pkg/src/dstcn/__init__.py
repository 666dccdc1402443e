"""Dual-scale multi-stage temporal convolutional network for wearable-IMU
exercise segmentation: numerics core, model, losses, data handling, synthetic
data generation, segmental evaluation metrics, and an experiment harness.
"""

__version__ = "0.1.0"
