"""Per-branch loss terms and the aggregate objective."""
