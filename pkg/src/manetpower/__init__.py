"""Decentralized multi-band power allocation for ad hoc networks with a gated GNN policy."""

__version__ = "0.1.0"
