"""Calendar-time piecewise-constant hazard models for vaccine efficacy trials."""

__version__ = "0.1.0"
