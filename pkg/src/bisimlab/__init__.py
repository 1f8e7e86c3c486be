"""Bisimulation measurements for tabular MDPs and offline datasets."""

__version__ = "0.1.0"
