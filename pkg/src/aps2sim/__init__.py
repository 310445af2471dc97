"""Desk-scale software model of a dynamic qubit control stack."""

__version__ = "0.1.0"
