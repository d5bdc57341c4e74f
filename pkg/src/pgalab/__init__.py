"""Perceptual generative autoencoder laboratory."""
