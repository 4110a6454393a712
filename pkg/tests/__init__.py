"""Test package for the variational inference services."""
