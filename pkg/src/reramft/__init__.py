"""Stuck-at fault tolerance of pruned networks on ReRAM crossbars."""

__version__ = "0.1.0"
