"""SpatioTemporal-Linear forecasting: models, training and experiment harness."""

__version__ = "0.1.0"
