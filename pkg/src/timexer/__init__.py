"""TimeXer forecasting with exogenous variables."""

__version__ = "0.1.0"
