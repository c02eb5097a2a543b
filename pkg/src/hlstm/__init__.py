"""Hidden-layer LSTM cells and grow-and-prune training in numpy."""
__version__ = "0.1.0"
