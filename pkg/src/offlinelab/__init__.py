"""Tabular offline RL: model-based and importance-sampling evaluation with dependent samples."""
__version__ = "0.1.0"
