"""Planar quadruped lab for random force injection (RFI), random actuation offsets (RAO) and their combinations."""

__version__ = "0.1.0"
