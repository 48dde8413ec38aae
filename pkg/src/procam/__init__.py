"""procam: projector-camera calibration from one structured-light shot per pose."""

__version__ = "0.1.0"
