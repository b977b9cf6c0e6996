"""Surprisal metric: expected distances under uncertainty, in nats.

A feature deviation expresses how uncertain an observed value is.  The
expected distance between two uncertain observations (each modeled as a
Laplace distribution centered at its observed value with scale equal to
the deviation) has a closed form; dividing it by the deviation and
removing the expected distance of a value against itself (1.5 nats for
the Laplace form) yields marginal surprisal.  Case surprisal sums the
weighted marginal surprisals over the features shared by two cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Expected self-distance, in deviation units, of the Laplace form.
SELF_SURPRISAL_LAPLACE = 1.5
# Probability floor used to cap nominal and NULL surprisals.
_PROB_FLOOR = 1e-15

NATS_PER_BIT = math.log(2.0)


def lk_laplace(diff, dev):
    """Expected |X - Y| for X ~ Laplace(a, dev), Y ~ Laplace(b, dev).

    ``diff`` is |a - b|; both arguments may be arrays.
    """
    d = np.abs(diff)
    dev = np.asarray(dev, dtype=np.float64)
    if np.any(dev <= 0.0):
        raise ValueError("deviation must be positive")
    with np.errstate(over="ignore"):
        return d + 0.5 * np.exp(-d / dev) * (3.0 * dev + d)


def lk_exponential(diff, dev):
    """Expected distance under the exponential (one-sided) form."""
    d = np.abs(diff)
    dev = np.asarray(dev, dtype=np.float64)
    if np.any(dev <= 0.0):
        raise ValueError("deviation must be positive")
    return d + 2.0 * dev * dev / (d + 2.0 * dev)


def case_probability(surprisal, weight=1.0):
    """Probability mass e^(-w * I) of a case with total surprisal I."""
    s = np.asarray(surprisal, dtype=np.float64)
    if np.any(s < 0.0) or weight <= 0.0:
        raise ValueError("surprisal must be >= 0 and weight > 0")
    with np.errstate(under="ignore"):
        out = np.exp(-weight * s)
    return float(out) if np.isscalar(surprisal) else out


def surprisal_of_probability(p):
    """Surprisal -ln p, in nats, of an event with probability p."""
    if not 0.0 < p <= 1.0:
        raise ValueError("probability must be in (0, 1]")
    return -math.log(p)


def nats_to_bits(nats):
    return nats / NATS_PER_BIT


def surprisal_continuous(diff, dev):
    """Marginal surprisal of a continuous difference, in nats (>= 0)."""
    dev = np.maximum(np.asarray(dev, dtype=np.float64), 1e-300)
    d = np.abs(diff)
    s = lk_laplace(d, dev) / dev - SELF_SURPRISAL_LAPLACE
    # a value carries no surprisal against itself, exactly
    return np.where(d == 0.0, 0.0, np.maximum(s, 0.0))


def cyclic_difference(a, b, period):
    d = np.abs(a - b) % period
    return np.minimum(d, period - d)


@dataclass
class FeatureDeviation:
    """Learned uncertainty of one feature.

    ``scale`` is the Laplace deviation for continuous-like kinds.  For
    nominal features ``match_prob`` is the probability that the observed
    class is the true class and ``mismatch_prob`` the default probability
    of any specific other class; ``pair_probs`` holds sparse overrides
    keyed by (observed_code, candidate_code).  ``null_prob`` is the
    probability that a NULL observation is informative for a value, used
    for NULL-vs-value comparisons of any kind.
    """

    kind: str
    scale: float = 1.0
    floor: float = 1e-12
    match_prob: float = 0.9
    mismatch_prob: float = 0.1
    n_classes: int = 2
    pair_probs: dict = field(default_factory=dict)
    null_prob: float = 0.5

    def clamp(self):
        self.scale = max(self.scale, self.floor, 1e-300)
        self.match_prob = min(max(self.match_prob, _PROB_FLOOR),
                              1.0 - _PROB_FLOOR)
        self.mismatch_prob = min(max(self.mismatch_prob, _PROB_FLOOR),
                                 self.match_prob)
        self.null_prob = min(max(self.null_prob, _PROB_FLOOR), 1.0)
        return self

    @property
    def null_surprisal(self):
        return -math.log(max(self.null_prob, _PROB_FLOOR))

    def nominal_surprisal(self, observed_code, candidate_code):
        """Surprisal of a candidate class given the observed class.

        The row of class probabilities given the observed value consists
        of ``match_prob`` for the observed class and ``mismatch_prob`` for
        every other class unless overridden; the most probable class of
        the row carries zero surprisal.
        """
        def row_prob(cand):
            default = (self.match_prob if cand == observed_code
                       else self.mismatch_prob)
            return self.pair_probs.get((observed_code, cand), default)

        row_max = row_prob(observed_code)
        for (obs, cand), p in self.pair_probs.items():
            if obs == observed_code:
                row_max = max(row_max, p)
        p = row_prob(candidate_code)
        return max(math.log(row_max) - math.log(max(p, _PROB_FLOOR)), 0.0)

    @property
    def min_mismatch_surprisal(self):
        """Smallest surprisal any non-matching class can have."""
        best = self.mismatch_prob
        for p in self.pair_probs.values():
            best = max(best, min(p, self.match_prob))
        return max(math.log(self.match_prob) - math.log(best), 0.0)

    def to_dict(self):
        return {
            "kind": self.kind, "scale": self.scale, "floor": self.floor,
            "match_prob": self.match_prob,
            "mismatch_prob": self.mismatch_prob,
            "n_classes": self.n_classes,
            "pair_probs": [[list(k), v] for k, v in self.pair_probs.items()],
            "null_prob": self.null_prob,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pair_probs"] = {tuple(k): v for k, v in d["pair_probs"]}
        return cls(**d)


class DeviationSpec:
    """Per-feature deviations used to turn differences into surprisal."""

    def __init__(self, devs):
        self.devs = dict(devs)

    def __getitem__(self, name):
        return self.devs[name]

    def __contains__(self, name):
        return name in self.devs

    def copy(self):
        import copy
        return DeviationSpec({k: copy.deepcopy(v)
                              for k, v in self.devs.items()})

    def to_dict(self):
        return {k: v.to_dict() for k, v in self.devs.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: FeatureDeviation.from_dict(v) for k, v in d.items()})


def smallest_nonzero_gap(values):
    """Smallest gap between consecutive distinct sorted values, or None."""
    u = np.unique(values[~np.isnan(values)])
    if len(u) < 2:
        return None
    return float(np.min(np.diff(u)))


def deviation_floor(values):
    gap = smallest_nonzero_gap(np.asarray(values, dtype=np.float64))
    if gap is None:
        return 1e-12
    return max(1e-12, gap * 1e-6)


def initial_deviations(view):
    """Starting deviations before any uncertainty analysis.

    Continuous-like features start at the smallest nonzero gap between
    observed values; nominal features start at a match error rate of
    1/(n + 1/2).  NULL informativeness starts at the observed null rate.
    """
    n = max(view.n, 1)
    devs = {}
    for f in view.features:
        col = view.cols[f.name]
        nulls = float(np.mean(col.null_mask)) if view.n else 0.0
        null_prob = min(max(nulls, 1.0 / (2.0 * n)), 0.5)
        if f.kind == "nominal":
            k = max(len(col.table), 2)
            eps = 1.0 / (n + 0.5)
            dev = FeatureDeviation(
                kind="nominal", match_prob=1.0 - eps,
                mismatch_prob=eps / (k - 1), n_classes=k,
                null_prob=null_prob)
        else:
            vals = col.data
            floor = deviation_floor(vals)
            gap = smallest_nonzero_gap(vals)
            dev = FeatureDeviation(
                kind=f.kind, scale=gap if gap is not None else floor,
                floor=floor, null_prob=null_prob)
        devs[f.name] = dev.clamp()
    return DeviationSpec(devs)


def feature_surprisal(view, name, dev, query_value, subset=None):
    """Surprisal of every stored value of one feature against a query value.

    ``query_value`` is encoded (see StoreView.encode_value).  Returns a
    float64 array over the stored cases (or ``subset`` indices).
    NULL-vs-NULL carries zero surprisal; NULL against a value carries the
    feature's NULL surprisal.
    """
    col = view.cols[name]
    data = col.data if subset is None else col.data[subset]
    if col.kind == "nominal":
        q = int(query_value)
        out = np.empty(len(data), dtype=np.float64)
        if q == -1:
            out.fill(dev.null_surprisal)
            out[data == -1] = 0.0
            return out
        stored_null = data == -1
        if not dev.pair_probs:
            mis = max(math.log(dev.match_prob)
                      - math.log(max(dev.mismatch_prob, _PROB_FLOOR)), 0.0)
            out.fill(mis)
            out[data == q] = 0.0
        else:
            codes = np.unique(data)
            out.fill(0.0)
            for c in codes:
                if c < 0:
                    continue
                out[data == c] = dev.nominal_surprisal(int(c), q)
        out[stored_null] = dev.null_surprisal
        return out
    # continuous, cyclic, ordinal
    if isinstance(query_value, float) and math.isnan(query_value):
        out = np.full(len(data), dev.null_surprisal)
        out[np.isnan(data)] = 0.0
        return out
    if col.kind == "cyclic":
        d = cyclic_difference(data, query_value, col.cycle_period)
    else:
        d = np.abs(data - query_value)
    out = surprisal_continuous(d, dev.scale)
    out[np.isnan(d)] = dev.null_surprisal
    return out


def case_surprisal_matrix(view, queries, features, spec, q_weights=None,
                          p=1.0, subset=None):
    """Total surprisal of stored cases against each query row.

    ``queries`` is a list of dicts of encoded values (one per query) or a
    single dict; ``features`` names the context features to compare;
    ``q_weights`` optionally maps feature name to its influence weight.
    With ``p != 1`` the weighted per-feature surprisals are combined with
    the generalized mean-style norm (sum of p-th powers, then 1/p root).
    Returns an array of shape (n_queries, n_cases).
    """
    single = isinstance(queries, dict)
    if single:
        queries = [queries]
    m = view.n if subset is None else len(subset)
    out = np.zeros((len(queries), m), dtype=np.float64)
    for qi, query in enumerate(queries):
        total = None
        for name in features:
            if name not in query:
                continue
            s = feature_surprisal(view, name, spec[name], query[name],
                                  subset=subset)
            if q_weights is not None:
                s = s * q_weights.get(name, 1.0)
            if p != 1.0:
                s = np.power(np.maximum(s, 0.0), p)
            total = s if total is None else total + s
        if total is None:
            total = np.zeros(m)
        elif p != 1.0:
            total = np.power(total, 1.0 / p)
        out[qi] = total
    return out[0] if single else out
