"""Siamese tracker attack laboratory."""
