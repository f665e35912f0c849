"""Muzzle-based cattle biometric identification."""

__version__ = "0.1.0"
