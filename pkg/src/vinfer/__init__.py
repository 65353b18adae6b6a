"""Commit-sample-verify protocol library for decentralized inference."""

__version__ = "0.1.0"
