"""Word relevance classification from eye-gaze and EEG biomarkers."""

__version__ = "0.1.0"
