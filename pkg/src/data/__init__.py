"""Manifest ingestion, preprocessing, augmentation and synthetic data."""
