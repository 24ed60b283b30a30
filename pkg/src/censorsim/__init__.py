"""Simulation of censoring in dynamic learning systems under selective labeling."""
from __future__ import annotations

__version__ = "0.1.0"
