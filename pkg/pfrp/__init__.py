"""
Retrieval-augmented univariate forecasting: a contrastively trained
lookback encoder, a k-medoids memory bank of historical horizons and
gated fusion with a local forecaster.
"""

__version__ = "0.1.0"
