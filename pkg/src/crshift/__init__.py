"""Conversion-rate prediction under demand shifts: hashed logistic models,
shift-aware variants, log-likelihood metrics and a longitudinal backtest."""

__version__ = "0.1.0"
