"""Joint longitudinal-survival modelling toolkit with similarity-based
personalized dynamic prediction."""

__version__ = "0.1.0"
