"""GAN-based visual anomaly detection robust to contaminated training data."""

__version__ = "0.1.0"
