"""Inference against the case store.

Discriminative reacts aggregate the influential cases of the query with
their influence probabilities: probability-weighted mean for continuous
features, largest accumulated class mass for nominal features, and the
continuous path rounded to the nearest rank for ordinal features.
Generative reacts sample one influential case and perturb its value by
the local residual scaled down by the desired conviction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metric import lk_laplace
from .query import influential_cases

# expansion steps and bisection depth for boundary-value search
_BOUNDARY_DOUBLINGS = 48
_BOUNDARY_BISECTIONS = 20


@dataclass
class Reaction:
    values: dict
    residuals: dict
    details: dict = field(default_factory=dict)


def _action_candidates(view, name, result):
    """Influential cases whose action value is observed (not NULL)."""
    col = view.cols[name]
    vals = col.data[result.indices]
    ok = ~(vals < 0) if col.kind == "nominal" else ~np.isnan(vals)
    return result.indices[ok], vals[ok], result.raw_probability[ok]


def _predict_feature(view, name, result):
    """(value, residual, class_masses) for one action feature."""
    col = view.cols[name]
    idx, vals, probs = _action_candidates(view, name, result)
    if len(idx) == 0:
        return None, None, {}
    total = probs.sum()
    if total <= 0:
        probs = np.full(len(probs), 1.0 / len(probs))
        total = 1.0
    infl = probs / total
    if col.kind == "nominal":
        masses = {}
        for c, p in zip(vals, infl):
            masses[int(c)] = masses.get(int(c), 0.0) + p
        best = max(sorted(masses), key=lambda c: masses[c])
        residual = 1.0 - masses[best]
        return view.decode_value(name, best), residual, masses
    pred = float(np.dot(infl, vals))
    residual = float(np.dot(infl, np.abs(vals - pred)))
    if col.kind == "ordinal":
        return view.decode_value(name, pred), residual, {}
    return pred, residual, {}


def react(view, model, context, actions, mode="discriminative",
          conviction=1.0, exclude=None, k=None, rng=None, details=False):
    """Predict or generate the action features given the context.

    ``model`` is an UncertaintyModel; ``context`` maps feature names to
    raw values; ``actions`` lists the features to infer.  ``conviction``
    only affects generative reacts: higher values hew closer to the
    stored cases.  Returns a :class:`Reaction`.
    """
    rng = np.random.default_rng() if rng is None else rng
    context = {k_: v for k_, v in context.items() if k_ not in actions}
    values, residuals, info = {}, {}, {}
    for name in actions:
        q_weights, p, kk = model.query_config(name, list(context))
        result = influential_cases(
            view, context, model.spec, q_weights=q_weights, p=p,
            k=k if k is not None else kk, exclude=exclude, rng=rng)
        if len(_action_candidates(view, name, result)[0]) == 0:
            # every influential case is missing the action value; requery
            # against the cases that observed it
            col = view.cols[name]
            nulls = np.nonzero(col.data < 0 if col.kind == "nominal"
                               else np.isnan(col.data))[0]
            drop = set(map(int, nulls))
            if exclude is not None:
                drop.update(int(i) for i in np.atleast_1d(exclude))
            if len(drop) < view.n:
                result = influential_cases(
                    view, context, model.spec, q_weights=q_weights, p=p,
                    k=k if k is not None else kk, exclude=sorted(drop),
                    rng=rng)
        if mode == "discriminative":
            value, residual, masses = _predict_feature(view, name, result)
            values[name] = value
            residuals[name] = residual
            if details:
                info[name] = {
                    "influential_cases": result.indices.tolist(),
                    "influence": result.influence.tolist(),
                    "surprisals": result.surprisals.tolist(),
                    "class_masses": {
                        view.decode_value(name, c): m
                        for c, m in masses.items()},
                }
        else:
            value, residual = _generate_feature(
                view, model, name, result, conviction, rng)
            values[name] = value
            residuals[name] = residual
    return Reaction(values, residuals, info)


def _generate_feature(view, model, name, result, conviction, rng):
    col = view.cols[name]
    att = view.feature_map[name]
    idx, vals, probs = _action_candidates(view, name, result)
    if len(idx) == 0:
        return None, None
    infl = probs / probs.sum() if probs.sum() > 0 else \
        np.full(len(probs), 1.0 / len(probs))
    if col.kind == "nominal":
        pred, residual, masses = _predict_feature(view, name, result)
        r = residual if residual is not None else 1.0
        p_follow = min(max(1.0 - r / conviction, 0.0), 1.0)
        eta = rng.random()
        if eta < p_follow:
            c = int(rng.choice(vals, p=infl))
        elif eta < 1.0 - (1.0 - p_follow) ** 2:
            # marginal draw from the whole store
            all_vals = col.data[col.data >= 0]
            w = view.weights[col.data >= 0]
            c = int(rng.choice(all_vals, p=w / w.sum()))
        else:
            table = att.domain if att.domain is not None else col.table
            c = view.encode_value(name, table[rng.integers(len(table))])
        return view.decode_value(name, c), r
    pick = int(rng.choice(len(idx), p=infl))
    case_idx = int(idx[pick])
    r = model.case_residual(view, name, case_idx)
    value = float(vals[pick]) + rng.laplace(0.0, max(r, 1e-300) / conviction)
    if att.bounds is not None:
        lo, hi = att.bounds
        if lo is not None:
            value = max(value, lo)
        if hi is not None:
            value = min(value, hi)
    if col.kind == "cyclic":
        value = value % col.cycle_period
    if col.kind == "ordinal":
        return view.decode_value(name, value), r
    return value, r


# ----------------------------------------------------------------------
# Boundary analysis

def boundary_values(view, model, context, action, rng=None):
    """Smallest perturbation of each continuous context feature that
    flips the predicted action.

    For a nominal action the prediction must change class; for a
    continuous action it must move beyond the query residual.  The search
    doubles the perturbation outward from the feature deviation and then
    bisects.  Returns {feature: signed perturbation or None}.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = react(view, model, context, [action], rng=rng)
    base_value = base.values[action]
    base_res = base.residuals[action] or 0.0
    col = view.cols[action]

    def flipped(pred):
        if pred is None:
            return False
        if col.kind == "nominal":
            return pred != base_value
        return abs(pred - base_value) > base_res

    out = {}
    for name in context:
        att = view.feature_map[name]
        if att.kind == "nominal" or name == action:
            out[name] = None
            continue
        dev = model.spec[name].scale
        found = None
        for sign in (1.0, -1.0):
            lo, hi = 0.0, None
            step = max(dev, 1e-12)
            for _ in range(_BOUNDARY_DOUBLINGS):
                q = dict(context)
                q[name] = context[name] + sign * step
                pred = react(view, model, q, [action], rng=rng) \
                    .values[action]
                if flipped(pred):
                    hi = step
                    break
                lo = step
                step *= 2.0
            if hi is None:
                continue
            for _ in range(_BOUNDARY_BISECTIONS):
                mid = 0.5 * (lo + hi)
                q = dict(context)
                q[name] = context[name] + sign * mid
                pred = react(view, model, q, [action], rng=rng) \
                    .values[action]
                if flipped(pred):
                    hi = mid
                else:
                    lo = mid
            if found is None or hi < abs(found):
                found = sign * hi
        out[name] = found
    return out


def boundary_cases(view, model, context, action, k=5, rng=None):
    """Influential cases ranked by how much the action value disagrees
    while the context agrees.

    Each influential case is scored by the ratio of its context surprisal
    to its surprisal once the action feature is included; the smallest
    ratios are the most boundary-like.  Returns (indices, ratios).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    q_weights, p, kk = model.query_config(action, list(context))
    result = influential_cases(view, context, model.spec,
                               q_weights=q_weights, p=p, k=kk, rng=rng)
    pred = react(view, model, context, [action], rng=rng).values[action]
    if pred is None or len(result.indices) == 0:
        return result.indices[:0], np.array([])
    from .metric import feature_surprisal
    enc = view.encode_value(action, pred)
    action_s = feature_surprisal(view, action, model.spec[action], enc,
                                 subset=result.indices)
    ctx_s = result.surprisals
    ratio = (ctx_s + 1e-12) / (ctx_s + action_s + 1e-12)
    order = np.argsort(ratio, kind="stable")[:k]
    return result.indices[order], ratio[order]


def residual_conviction(view, model, context, action, actual, rng=None):
    """Expected error relative to the observed error for one query.

    Values above 1 mean the observed error is smaller than expected.
    Both the expected residual and the observed error are smoothed with
    the feature deviation so the ratio stays finite for exact hits.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rx = react(view, model, context, [action], rng=rng)
    pred, r = rx.values[action], rx.residuals[action]
    if pred is None:
        return None
    col = view.cols[action]
    if col.kind == "nominal":
        dev = model.spec[action]
        smooth = max(dev.mismatch_prob, 1e-12)
        err = 0.0 if actual == pred else 1.0
        return (r + smooth) / (err + smooth)
    dev = model.spec[action].scale
    if col.kind == "ordinal":
        pred_enc = view.encode_value(action, pred)
        actual_enc = view.encode_value(action, actual)
        err = abs(pred_enc - actual_enc)
    else:
        err = abs(float(actual) - pred)
        if col.kind == "cyclic":
            from .metric import cyclic_difference
            err = float(cyclic_difference(
                np.asarray(err), 0.0, col.cycle_period))
    return float(lk_laplace(r, dev) / lk_laplace(err, dev))
