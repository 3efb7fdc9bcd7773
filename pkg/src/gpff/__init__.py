"""Gaussian-process inverse models for feedforward control."""
