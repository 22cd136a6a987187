"""Desk-scale HistoPrism model, GPC pathway benchmark and evaluation tools."""

__version__ = "0.1.0"
