"""Deterministic training with a microbatch write-ahead log and exact unlearning paths."""

__version__ = "0.1.0"
