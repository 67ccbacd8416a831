"""Age labels and multi-granularity class mapping."""
