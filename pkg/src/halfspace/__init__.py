"""Mixture-of-simple-experts toolkit for ReLU nets and deep linearly gated networks."""

__version__ = "0.1.0"
