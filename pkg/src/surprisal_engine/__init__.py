"""Instance-based learning engine that measures distance in units of surprisal.

The engine stores training cases verbatim and answers discriminative,
generative, explanatory and synthesis queries by weighting stored cases
with the probability implied by their surprisal (in nats) relative to the
query.  There is no fitted parametric model; all uncertainty quantities
(deviations, residuals, feature influence probabilities) are estimated
directly from the stored cases.
"""

from .schema import (
    FeatureAttribute,
    CaseStore,
    SchemaError,
    infer_feature_attributes,
)
from .metric import DeviationSpec, FeatureDeviation
from .analyze import UncertaintyModel, analyze
from .react import react
from .query import influential_cases, similar_cases, find_nearest_cases

__version__ = "0.1.0"

__all__ = [
    "FeatureAttribute",
    "CaseStore",
    "SchemaError",
    "infer_feature_attributes",
    "DeviationSpec",
    "FeatureDeviation",
    "UncertaintyModel",
    "analyze",
    "react",
    "influential_cases",
    "similar_cases",
    "find_nearest_cases",
    "__version__",
]
