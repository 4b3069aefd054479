"""Next-contest rating prediction for Codeforces contestants with from-scratch
recurrent networks (LSTM, GRU, Bi-LSTM, LSTM with additive attention)."""

__version__ = "0.1.0"
