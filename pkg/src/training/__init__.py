"""Training loop, learning-rate schedule and checkpoints."""
