"""Adaptive-learning-rate black-box variational inference."""
