"""Federated submodel optimization simulator."""
