"""Sepsis subphenotyping: rule-based case screening, latent profile analysis and
profile-targeted tree-ensemble models with ROC statistics."""
import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
