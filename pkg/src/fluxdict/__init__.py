"""Sparse decompositions of activation datasets: TopK SAEs, ITDA, whitening,
metrics, steering export and visual autointerp."""

__version__ = "0.1.0"
