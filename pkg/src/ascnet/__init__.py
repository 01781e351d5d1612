"""Attention-based convolutional denoising autoencoder for single-lead ECG."""

__version__ = "0.1.0"
