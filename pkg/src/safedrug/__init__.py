"""Safe drug-combination recommendation from longitudinal EHR visits."""

__version__ = "0.1.0"
