"""Test-time adaptation with reusable prompt assets and a closed-form convex bridge."""

__version__ = "0.1.0"
