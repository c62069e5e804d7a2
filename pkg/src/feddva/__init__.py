"""Desk-scale federated dual variational autoencoding simulator."""

__version__ = "0.1.0"
