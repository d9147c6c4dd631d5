"""Multiple imputation for monotone-missing mixed-type longitudinal trial data."""

__version__ = "0.1.0"
