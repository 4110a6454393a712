"""Service layer: variational families, optimization, diagnostics and experiments."""
