"""Case querying: influential-set selection and exact nearest-case search.

The influential set of a query grows from the nearest case outward and
stops when the probability of the next candidate relative to the total
probability already included falls below e**-3.  The fast nearest-case
path computes partial surprisal sums from cheap per-feature terms (exact
matches and values within five deviations), bounds the remainder from
below, seeds a rejection threshold from high-overlap candidates and only
fully resolves cases whose lower bound survives the threshold.  It returns
exactly the same cases as a full scan, up to seeded tie-breaking among
equal surprisals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metric import (case_surprisal_matrix, feature_surprisal,
                     surprisal_continuous, cyclic_difference)

# Inclusion threshold for growing the influential set.
BANDWIDTH_THRESHOLD = math.exp(-3.0)
# Continuous terms within this many deviations are resolved eagerly.
_EXPANSION_DEVIATIONS = 5.0
# Seeding pool for the fast path.
_SEED_CAP = 1024
_SEED_FRACTION = 8


@dataclass
class QueryResult:
    indices: np.ndarray       # case indices, nearest first
    surprisals: np.ndarray    # total surprisal of each case
    influence: np.ndarray     # normalized influence probabilities
    raw_probability: np.ndarray  # unnormalized exp(-w * I)


def encode_context(view, context):
    return {k: view.encode_value(k, v) for k, v in context.items()}


def _constraint_mask(view, constraints):
    if not constraints:
        return None
    mask = np.ones(view.n, dtype=bool)
    for name, rule in constraints.items():
        col = view.cols[name]
        if isinstance(rule, (list, set, tuple)):
            allowed = {view.encode_value(name, v) for v in rule}
            mask &= np.isin(col.data, list(allowed))
        else:
            lo, hi = rule["min"], rule["max"]
            mask &= (col.data >= lo) & (col.data <= hi)
    return mask


def _dependency_mask(view, context):
    """Restrict candidates to exact matches on controlling features.

    When any declared feature depends on a feature present in the context,
    candidate cases must agree with the context on that controlling
    feature.
    """
    controlling = set()
    for f in view.features:
        for dep in f.dependent_on:
            if dep in context:
                controlling.add(dep)
    if not controlling:
        return None
    mask = np.ones(view.n, dtype=bool)
    for name in controlling:
        col = view.cols[name]
        q = view.encode_value(name, context[name])
        if col.kind == "nominal":
            mask &= col.data == q
        else:
            mask &= col.data == q
    return mask


def select_bandwidth(sorted_probs, k_min=1, k_max=None,
                     threshold=BANDWIDTH_THRESHOLD):
    """Number of cases to include given probabilities in nearest-first order.

    Cases are added while the probability of the next candidate relative
    to the total probability already included stays at or above the
    threshold.
    """
    n = len(sorted_probs)
    if n == 0:
        return 0
    k_max = n if k_max is None else min(k_max, n)
    k_min = max(1, min(k_min, k_max))
    cum = np.cumsum(sorted_probs)
    ratios = sorted_probs[1:k_max] / np.maximum(cum[:k_max - 1], 1e-300)
    below = np.nonzero(ratios < threshold)[0]
    k = k_max if len(below) == 0 else below[0] + 1
    return max(k, k_min)


def _order_with_ties(surprisals, rng):
    jitter = rng.random(len(surprisals))
    return np.lexsort((jitter, surprisals))


def full_scan(view, context, spec, q_weights=None, p=1.0, exclude=None,
              constraints=None):
    """Total surprisal of every stored case against the context."""
    enc = encode_context(view, context)
    total = case_surprisal_matrix(view, enc, list(enc), spec,
                                  q_weights=q_weights, p=p)
    mask = _constraint_mask(view, constraints)
    dmask = _dependency_mask(view, context)
    if dmask is not None:
        mask = dmask if mask is None else (mask & dmask)
    if mask is not None:
        total = np.where(mask, total, np.inf)
    if exclude is not None:
        total = total.copy()
        total[list(exclude)] = np.inf
    return total


def influential_cases(view, context, spec, q_weights=None, p=1.0,
                      k=None, k_min=1, k_max=None, exclude=None,
                      constraints=None, rng=None, fast=False):
    """Cases that influence the query, with normalized influence weights.

    With ``k`` set the result has exactly k cases (similarity query);
    otherwise the probability-ratio stopping rule picks the bandwidth.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if fast and constraints is None and p == 1.0:
        upper = _bandwidth_upper(view, k, k_max)
        idx, total = find_nearest_cases(
            view, context, spec, k_upper=upper,
            q_weights=q_weights, exclude=exclude, rng=rng)
        if k is None and len(idx) == upper < view.n:
            w = view.weights[idx]
            probs = _shifted_probs(w, total)
            if select_bandwidth(probs, k_min=k_min, k_max=k_max) == upper:
                # stopping rule did not terminate inside the fast window
                return influential_cases(
                    view, context, spec, q_weights=q_weights, p=p, k=k,
                    k_min=k_min, k_max=k_max, exclude=exclude,
                    constraints=constraints, rng=rng, fast=False)
    else:
        totals = full_scan(view, context, spec, q_weights=q_weights, p=p,
                           exclude=exclude, constraints=constraints)
        order = _order_with_ties(totals, rng)
        order = order[np.isfinite(totals[order])]
        idx, total = order, totals[order]
    w = view.weights[idx]
    shifted = _shifted_probs(w, total)
    if k is not None:
        keep = min(k, len(idx))
    else:
        keep = select_bandwidth(shifted, k_min=k_min, k_max=k_max)
    idx, total, shifted = idx[:keep], total[:keep], shifted[:keep]
    norm = shifted.sum()
    influence = shifted / norm if norm > 0 else \
        np.full(len(shifted), 1.0 / max(len(shifted), 1))
    with np.errstate(under="ignore"):
        raw = np.exp(-w[:len(total)] * total)
    return QueryResult(idx, total, influence, raw)


def _shifted_probs(weights, total):
    """exp(-w*I) shifted by the row minimum so the best candidate never
    underflows; selection ratios and normalized influence are invariant
    to the shift."""
    expo = weights * total
    base = expo.min() if len(expo) and np.isfinite(expo).any() else 0.0
    if not np.isfinite(base):
        base = 0.0
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(-(np.asarray(expo) - base))


def similar_cases(view, context, spec, k, **kw):
    return influential_cases(view, context, spec, k=k, **kw)


def _bandwidth_upper(view, k, k_max):
    if k is not None:
        return k
    if k_max is not None:
        return k_max
    # The stopping rule cannot include more than ~e^3 equal-probability
    # cases past any point, so a generous fixed upper bound is safe for
    # typical data; the caller falls back to a full scan when exceeded.
    return min(view.n, 256)


# ----------------------------------------------------------------------
# Exact fast-path nearest-case search

def find_nearest_cases(view, context, spec, k_upper, q_weights=None,
                       exclude=None, rng=None):
    """Exact k nearest cases by total surprisal, with sound pruning.

    Builds partial sums from per-feature terms that are cheap to resolve
    (nominal comparisons, NULLs and continuous differences within five
    deviations), lower-bounds every unresolved term by the cheapest
    surprisal an unresolved term could still have, seeds the rejection
    threshold from candidates with the most resolved terms and fully
    resolves only the survivors.  Returns (indices, surprisals) sorted
    nearest first with seeded tie-breaking.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    enc = encode_context(view, context)
    names = [n for n in enc]
    n = view.n
    if n == 0:
        return np.array([], dtype=int), np.array([])
    k_upper = min(k_upper, n)

    partial = np.zeros(n, dtype=np.float64)
    unpop = np.zeros(n, dtype=np.int64)
    unresolved_bounds = []
    unresolved_feats = []
    for name in names:
        col = view.cols[name]
        dev = spec[name]
        w = 1.0 if q_weights is None else q_weights.get(name, 1.0)
        q = enc[name]
        if col.kind == "nominal" or \
                (isinstance(q, float) and math.isnan(q)):
            # all terms cheap: resolve the whole column now
            partial += w * feature_surprisal(view, name, dev, q)
            continue
        data = col.data
        if col.kind == "cyclic":
            d = cyclic_difference(data, q, col.cycle_period)
        else:
            d = np.abs(data - q)
        within = d <= _EXPANSION_DEVIATIONS * dev.scale
        nullv = np.isnan(d)
        terms = np.zeros(n)
        terms[within] = w * surprisal_continuous(d[within], dev.scale)
        terms[nullv] = w * dev.null_surprisal
        populated = within | nullv
        partial += np.where(populated, terms, 0.0)
        unresolved = ~populated
        if unresolved.any():
            unpop += unresolved
            # any unresolved term is beyond five deviations
            bound = w * surprisal_continuous(
                _EXPANSION_DEVIATIONS * dev.scale, dev.scale)
            unresolved_bounds.append(bound)
            unresolved_feats.append((name, unresolved))

    # cumulative minimum possible remainder for m unresolved terms
    bounds = np.sort(np.asarray(unresolved_bounds))
    cum_min = np.concatenate(([0.0], np.cumsum(bounds)))
    lower = partial + cum_min[np.minimum(unpop, len(bounds))]

    excluded = np.zeros(n, dtype=bool)
    if exclude is not None:
        excluded[list(exclude)] = True
    dmask = _dependency_mask(view, context)
    if dmask is not None:
        excluded |= ~dmask
    live = np.nonzero(~excluded)[0]
    if len(live) == 0:
        return np.array([], dtype=int), np.array([])
    k_upper = min(k_upper, len(live))

    def resolve(idx):
        totals = partial[idx].copy()
        for name, unresolved in unresolved_feats:
            sel = idx[unresolved[idx]]
            if len(sel) == 0:
                continue
            col = view.cols[name]
            dev = spec[name]
            w = 1.0 if q_weights is None else q_weights.get(name, 1.0)
            q = enc[name]
            if col.kind == "cyclic":
                d = cyclic_difference(col.data[sel], q, col.cycle_period)
            else:
                d = np.abs(col.data[sel] - q)
            totals[unresolved[idx]] += w * surprisal_continuous(d, dev.scale)
        return totals

    # seed the rejection threshold from candidates with many resolved terms
    pool = min(max(_SEED_CAP, k_upper), len(live))
    sample_size = min(max(len(live) // _SEED_FRACTION, k_upper), pool)
    sampled = rng.choice(live, size=sample_size, replace=False)
    seed_order = sampled[np.argsort(unpop[sampled], kind="stable")]
    seeds = seed_order[:max(k_upper, min(len(seed_order), 4 * k_upper))]
    seed_totals = resolve(seeds)
    kth = np.partition(seed_totals, k_upper - 1)[k_upper - 1]
    reject = kth

    survivors = live[lower[live] <= reject]
    extra = survivors[~np.isin(survivors, seeds)]
    all_idx = np.concatenate([seeds, extra])
    all_tot = np.concatenate([seed_totals, resolve(extra)])
    order = _order_with_ties(all_tot, rng)[:k_upper]
    return all_idx[order], all_tot[order]


# ----------------------------------------------------------------------
# Goal-directed retrieval

def goal_cases(view, context, spec, goals, k=None, **kw):
    """Influential cases re-ranked toward goal feature values.

    ``goals`` maps feature name to {"goal": "min"|"max"} or
    {"value": v}.  Among the influential cases of the context, cases are
    scored by goal loss and the best-scoring case(s) returned.
    """
    res = influential_cases(view, context, spec, k=k, **kw)
    if len(res.indices) == 0:
        return res.indices, np.array([])
    loss = np.zeros(len(res.indices))
    for name, rule in goals.items():
        col = view.cols[name]
        vals = col.data[res.indices].astype(np.float64) \
            if col.kind != "nominal" else None
        if "value" in rule:
            q = view.encode_value(name, rule["value"])
            loss += feature_surprisal(view, name, spec[name], q,
                                      subset=res.indices)
        elif rule["goal"] == "min":
            loss += (vals - np.nanmin(vals)) / (np.nanstd(vals) + 1e-12)
        else:
            loss += (np.nanmax(vals) - vals) / (np.nanstd(vals) + 1e-12)
    order = np.argsort(loss, kind="stable")
    return res.indices[order], loss[order]


def goal_values(view, context, spec, goals, **kw):
    """Feature values of the best goal-directed case."""
    idx, _ = goal_cases(view, context, spec, goals, **kw)
    if len(idx) == 0:
        return None
    best = int(idx[0])
    return {f.name: view.decode_value(f.name, view.cols[f.name].data[best])
            for f in view.features}
