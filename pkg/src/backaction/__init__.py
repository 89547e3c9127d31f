"""Simulation and analysis toolkit for a milligram suspended mirror driven by radiation-pressure back-action."""

__version__ = "0.1.0"
