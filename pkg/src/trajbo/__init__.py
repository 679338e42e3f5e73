"""Few-shot Bayesian optimization with trajectory-prior transformer surrogates."""

__version__ = "0.1.0"
