"""Route queries between a fast and a slow reasoning engine.

Four complexity features (correlation strength, domain crossing, stakeholder
multiplicity, uncertainty) feed a routing policy whose score is compared to
an adaptive threshold.
"""

from cdr.features import FeatureVector, QueryRecord, extract_features
from cdr.routing import Router, Strategy, ThresholdState, route

__all__ = ["FeatureVector", "QueryRecord", "Router", "Strategy", "ThresholdState", "extract_features", "route"]
