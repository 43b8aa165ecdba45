"""Dual-task ECG classification: subject identity and activity from one backbone."""

__version__ = "0.1.0"
