"""Command-line entry points, run configuration and checkpoints."""
