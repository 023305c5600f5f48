"""Label notebook code cells with data-analysis stages."""

__version__ = "0.1.0"
