"""Vectorized store-vs-store surprisal and batched neighbor prediction.

Queries here are stored cases, so per-feature surprisal matrices can be
built directly from the encoded columns and reused across coalitions and
iterations.  The prediction path mirrors the single-query react: sort by
total surprisal, grow the influential set with the probability-ratio
stopping rule and aggregate with influence weights.
"""

from __future__ import annotations

import math

import numpy as np

from .metric import surprisal_continuous, cyclic_difference
from .query import BANDWIDTH_THRESHOLD


PREDICTION_SCALE_SPAN = 5.0


def _prediction_scale(view, col, dev):
    """Effective continuous deviation for batched predictions.

    Clamped below at a data-spacing scale (a few consecutive gaps) so a
    deviation at its floor — legitimate for exactly substitutable values
    — still yields neighborhoods that average several cases instead of
    degenerating to the single nearest match.
    """
    data = col.data
    ok = ~np.isnan(data)
    n = int(ok.sum())
    if n < 2:
        return dev.scale
    span = float(np.nanmax(data) - np.nanmin(data))
    return max(dev.scale, PREDICTION_SCALE_SPAN * span / n)


def feature_surprisal_matrix(view, name, dev, rows, cols_subset=None):
    """Surprisal of stored cases ``cols_subset`` (default: all) against
    stored cases ``rows``.

    Returns an array of shape (len(rows), n_cols).
    """
    col = view.cols[name]
    col_data = col.data if cols_subset is None else col.data[cols_subset]
    if col.kind == "nominal":
        q = col.data[rows][:, None]
        s = col_data[None, :]
        if dev.pair_probs:
            out = np.zeros((len(rows), len(col_data)))
            for oc in np.unique(q):
                for cc in np.unique(s):
                    m = (q == oc) & (s == cc)
                    if not m.any():
                        continue
                    if oc == -1 or cc == -1:
                        val = 0.0 if oc == cc else dev.null_surprisal
                    else:
                        val = dev.nominal_surprisal(int(oc), int(cc))
                    out[m] = val
            return out
        mis = max(math.log(dev.match_prob)
                  - math.log(max(dev.mismatch_prob, 1e-300)), 0.0)
        out = np.where(q == s, 0.0, mis)
        qn, sn = q == -1, s == -1
        out = np.where(qn ^ sn, dev.null_surprisal, out)
        out = np.where(qn & sn, 0.0, out)
        return out
    a = col.data[rows][:, None]
    b = col_data[None, :]
    if col.kind == "cyclic":
        d = cyclic_difference(a, b, col.cycle_period)
    else:
        d = np.abs(a - b)
    out = surprisal_continuous(d, _prediction_scale(view, col, dev))
    an, bn = np.isnan(a), np.isnan(b)
    out = np.where(an ^ bn, dev.null_surprisal, out)
    out = np.where(an & bn, 0.0, out)
    return out


def total_matrix(view, rows, features, spec, q_weights=None,
                 cols_subset=None):
    m = view.n if cols_subset is None else len(cols_subset)
    total = np.zeros((len(rows), m))
    for name in features:
        w = 1.0 if q_weights is None else q_weights.get(name, 1.0)
        total += w * feature_surprisal_matrix(view, name, spec[name], rows,
                                              cols_subset=cols_subset)
    return total


def bandwidth_mask(T, weights, k_min=1, k_max=None,
                   threshold=BANDWIDTH_THRESHOLD, rng=None, fixed_k=None):
    """Influential-set selection for every row of a surprisal matrix.

    Returns (order, probs_sorted, mask) where ``order`` sorts each row by
    surprisal with seeded tie-breaking and ``mask`` marks the selected
    prefix of each sorted row.
    """
    m, n = T.shape
    rng = np.random.default_rng(0) if rng is None else rng
    jitter = rng.random((m, n))
    order = np.lexsort((jitter, T), axis=1)
    T_sorted = np.take_along_axis(T, order, axis=1)
    w_sorted = weights[order]
    # Shift each row's exponent by its minimum so the weights never all
    # underflow; normalized influence and the cumulative-ratio stopping
    # rule are invariant to a per-row shift.
    expo = w_sorted * T_sorted
    finite = np.isfinite(T_sorted)
    base = np.where(finite, expo, np.inf).min(axis=1, keepdims=True)
    base = np.where(np.isfinite(base), base, 0.0)
    with np.errstate(over="ignore", under="ignore"):
        probs = np.exp(-(expo - base))
    probs[~finite] = 0.0
    if fixed_k is not None:
        k = np.full(m, min(fixed_k, n))
    else:
        k_max = n if k_max is None else min(k_max, n)
        cum = np.cumsum(probs, axis=1)
        ratios = probs[:, 1:k_max] / np.maximum(cum[:, :k_max - 1], 1e-300)
        below = ratios < threshold
        k = np.where(below.any(axis=1), below.argmax(axis=1) + 1, k_max)
        k = np.maximum(k, k_min)
    mask = np.arange(n)[None, :] < k[:, None]
    return order, probs, mask


class BatchPredictor:
    """Self-excluded neighbor predictions for a set of stored rows."""

    def __init__(self, view, rows, rng=None, fixed_k=None, k_min=1):
        self.view = view
        self.rows = np.asarray(rows)
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.fixed_k = fixed_k
        self.k_min = k_min
        self._feat_cache = {}

    def feature_matrix(self, name, spec):
        key = name
        cached = self._feat_cache.get(key)
        if cached is not None and cached[0] is spec[name]:
            return cached[1]
        mat = feature_surprisal_matrix(self.view, name, spec[name],
                                       self.rows)
        self._feat_cache[key] = (spec[name], mat)
        return mat

    def total(self, features, spec, q_weights=None):
        T = np.zeros((len(self.rows), self.view.n))
        for name in features:
            w = 1.0 if q_weights is None else q_weights.get(name, 1.0)
            T = T + w * self.feature_matrix(name, spec)
        T[np.arange(len(self.rows)), self.rows] = np.inf  # self-exclusion
        return T

    def neighborhoods(self, T):
        return bandwidth_mask(T, self.view.weights, rng=self.rng,
                              fixed_k=self.fixed_k, k_min=self.k_min)

    def predict(self, name, order, probs, mask):
        """Predict feature ``name`` for every row.

        Returns (pred, residual, score) where ``pred`` is in encoded
        units (class codes for nominal), ``residual`` the per-row
        residual estimate, and ``score`` the influence mass fraction of
        the predicted class (nominal) or None.
        """
        col = self.view.cols[name]
        vals = col.data[order]
        if col.kind == "nominal":
            votable = (vals >= 0) & mask
            pw = probs * votable
            denom = pw.sum(axis=1)
            codes = np.unique(col.data[col.data >= 0])
            if len(codes) == 0:
                return (np.full(len(order), -1), np.ones(len(order)), None)
            masses = np.stack([(pw * (vals == c)).sum(axis=1)
                               for c in codes], axis=1)
            best = np.argmax(masses, axis=1)
            pred = codes[best]
            frac = masses[np.arange(len(order)), best] / \
                np.maximum(denom, 1e-300)
            pred = np.where(denom > 0, pred, -1)
            return pred, 1.0 - frac, frac
        votable = ~np.isnan(vals) & mask
        pw = probs * votable
        denom = np.maximum(pw.sum(axis=1), 1e-300)
        safe_vals = np.where(votable, vals, 0.0)
        pred = (pw * safe_vals).sum(axis=1) / denom
        resid = (pw * np.abs(safe_vals - pred[:, None])).sum(axis=1) / denom
        pred = np.where(pw.sum(axis=1) > 0, pred, np.nan)
        return pred, resid, None


def marginal_prediction(view, name):
    """Global weighted prediction used for the empty context."""
    col = view.cols[name]
    w = view.weights
    if col.kind == "nominal":
        ok = col.data >= 0
        if not ok.any():
            return -1, 1.0
        codes = np.unique(col.data[ok])
        masses = np.array([w[ok][col.data[ok] == c].sum() for c in codes])
        best = int(np.argmax(masses))
        return int(codes[best]), 1.0 - masses[best] / masses.sum()
    ok = ~np.isnan(col.data)
    if not ok.any():
        return np.nan, np.nan
    pred = float(np.average(col.data[ok], weights=w[ok]))
    resid = float(np.average(np.abs(col.data[ok] - pred), weights=w[ok]))
    return pred, resid
