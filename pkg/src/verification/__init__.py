"""On-demand invariant checks."""
