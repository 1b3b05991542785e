"""Desk-scale benchmark for tracker-hijacking patch attacks on a
detector+MOT perception pipeline."""

__version__ = "0.1.0"
