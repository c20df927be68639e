"""Latent profile analysis: constrained Gaussian mixtures, EM and BIC selection."""
from .em import (FitFailed, MixtureModel, assign_profiles, bic, em_fit, kmeans_starts,
                 log_likelihood, posterior)
from .families import (DIAGONAL, FAMILIES, FAMILY_CODES, CovParams, DegenerateFit,
                       free_parameter_count, log_component_densities)
from .selection import DEFAULT_G_RANGE, SelectionFailed, SelectionGrid, model_select

__all__ = [
    "FAMILIES", "FAMILY_CODES", "DIAGONAL", "CovParams", "DegenerateFit", "FitFailed",
    "MixtureModel", "SelectionGrid", "SelectionFailed", "DEFAULT_G_RANGE",
    "free_parameter_count", "log_component_densities", "em_fit", "posterior", "bic",
    "log_likelihood", "assign_profiles", "model_select", "kmeans_starts",
]
