"""Latent-space gaze and head redirection on a synthetic differentiable world."""

__version__ = "0.1.0"
