"""Bayesian adaptive limits for longitudinal biomarker profiles."""
from .errors import AdaptiveLimitsError
from .profiles import Athlete, Label, Marker, MarkerVector, ProfileCollection, RawSample, Sex

__version__ = "0.1.0"

__all__ = ["AdaptiveLimitsError", "Athlete", "Label", "Marker", "MarkerVector",
           "ProfileCollection", "RawSample", "Sex", "__version__"]
