"""Force Regularization and cross-filter low-rank decomposition of CNN layers."""

__version__ = "0.1.0"
