"""Neurosymbolic loss laboratory: semantic loss, disjunctive supervision and their training dynamics."""

__version__ = "0.1.0"
