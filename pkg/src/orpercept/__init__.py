"""Multi-camera robot perception: calibration, fusion, and synthetic oracle."""

__version__ = "0.1.0"

CAMERA_NAMES = ("OP", "USM1", "USM4", "BASE")
