"""Backbones and the five-branch network head."""
