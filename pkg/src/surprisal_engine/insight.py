"""Explanation: feature contributions, influence probabilities and
causal asymmetry discovery.

Contributions are expectations over feature coalitions.  For a target t
and feature j, coalitions are drawn from the power set of the remaining
features; the accuracy contribution of j is the expected change in
prediction error when j joins a coalition (negative when j helps).
Comparing the interpretable (surprisal-scaled) contributions of a feature
pair in both directions yields an asymmetry whose magnitude and sign
suggest a directed relationship.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from ._batch import BatchPredictor, marginal_prediction

# Coalition enumeration is exhaustive while the context has at most this
# many features; beyond that, coalitions are sampled.
EXHAUSTIVE_LIMIT = 12
DEFAULT_COALITION_SAMPLES = 256
DEFAULT_EVAL_ROWS = 128

# Defaults for causal edge extraction.
EDGE_THRESHOLD_NATS = 0.1
UNDIRECTED_MCR = 2.0


class CoalitionEngine:
    """Evaluates prediction error of feature coalitions on sampled rows."""

    def __init__(self, view, spec, eval_rows, rng, fixed_k=None):
        self.view = view
        self.spec = spec
        self.rows = np.asarray(eval_rows)
        self.bp = BatchPredictor(view, self.rows, rng=rng, fixed_k=fixed_k)
        self._cache = {}
        self._actuals = {}

    def actual(self, name):
        if name not in self._actuals:
            self._actuals[name] = self.view.cols[name].data[self.rows]
        return self._actuals[name]

    def _evaluate(self, coalition, targets):
        errors, preds = {}, {}
        if not coalition:
            for t in targets:
                actual = self.actual(t)
                col = self.view.cols[t]
                mp, _ = marginal_prediction(self.view, t)
                if col.kind == "nominal":
                    w = self.view.weights
                    ok = col.data >= 0
                    tot = w[ok].sum()
                    share = {int(c): w[ok][col.data[ok] == c].sum() / tot
                             for c in np.unique(col.data[ok])}
                    err = np.array([1.0 - share.get(int(a), 0.0)
                                    if a >= 0 else np.nan
                                    for a in actual])
                    pred = np.full(len(self.rows), float(mp))
                else:
                    err = np.abs(actual - mp)
                    pred = np.full(len(self.rows), mp)
                errors[t], preds[t] = err, pred
            return errors, preds
        T = self.bp.total(coalition, self.spec)
        order, probs, mask = self.bp.neighborhoods(T)
        for t in targets:
            col = self.view.cols[t]
            actual = self.actual(t)
            pred, resid, _ = self.bp.predict(t, order, probs, mask)
            if col.kind == "nominal":
                vals = col.data[order]
                votable = (vals >= 0) & mask
                pw = probs * votable
                denom = np.maximum(pw.sum(axis=1), 1e-300)
                m_act = (pw * (vals == actual[:, None])).sum(axis=1) / denom
                err = np.where(actual >= 0, 1.0 - m_act, np.nan)
            else:
                err = np.abs(pred - actual)
            errors[t], preds[t] = err, pred.astype(np.float64)
        return errors, preds

    def errors(self, coalition, targets):
        key = frozenset(coalition)
        missing = [t for t in targets if (key, t) not in self._cache]
        if missing:
            errs, preds = self._evaluate(sorted(key), missing)
            for t in missing:
                self._cache[(key, t)] = (errs[t], preds[t])
        return {t: self._cache[(key, t)] for t in targets}


def _mean(err):
    ok = np.isfinite(err)
    return float(err[ok].mean()) if ok.any() else np.nan


def _weighted_nanmean(values, weights):
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    ok = np.isfinite(v)
    if not ok.any() or w[ok].sum() <= 0:
        return float("nan")
    return float(np.average(v[ok], weights=w[ok]))


def _coalitions(features, rng, n_samples, exhaustive_limit):
    features = list(features)
    if len(features) <= exhaustive_limit:
        out = []
        for r in range(len(features) + 1):
            out.extend(itertools.combinations(features, r))
        return [tuple(c) for c in out], True
    out = {()}
    while len(out) < n_samples:
        size = int(rng.integers(0, len(features) + 1))
        c = tuple(sorted(rng.choice(features, size=size, replace=False)))
        out.add(c)
    return sorted(out), False


def _size_weight(size, m):
    """Weight of one coalition of ``size`` features out of ``m`` so that
    every coalition size carries equal total mass (small and large
    coalitions equally represented); with this weighting the directional
    contributions sum exactly to full-context minus empty-baseline."""
    return 1.0 / ((m + 1) * math.comb(m, size))


def _eval_rows(view, rng, n_rows):
    n = view.n
    if n <= n_rows:
        return np.arange(n)
    return np.sort(rng.choice(n, size=n_rows, replace=False))


def accuracy_contributions(view, spec, target, context_features=None,
                           rng=None, n_samples=DEFAULT_COALITION_SAMPLES,
                           n_rows=DEFAULT_EVAL_ROWS,
                           exhaustive_limit=EXHAUSTIVE_LIMIT, engine=None,
                           fixed_k=None):
    """Expected change in prediction error when each feature joins a
    coalition predicting ``target``.

    Returns (ac, rr): ``ac`` maps feature name to its contribution
    (negative = reduces error) and ``rr`` is the robust residual of the
    target, the expected error over the sampled coalitions.

    ``fixed_k`` overrides the adaptive influence bandwidth with a fixed
    neighbor count for the coalition predictions; useful when deviations
    are much smaller than residuals and the adaptive bandwidth becomes
    too local for stable error estimates.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    feats = [f for f in (context_features or view.feature_names)
             if f != target]
    if engine is None:
        engine = CoalitionEngine(view, spec, _eval_rows(view, rng, n_rows),
                                 rng, fixed_k=fixed_k)
    bases, exhaustive = _coalitions(feats, rng, n_samples, exhaustive_limit)
    ac = {j: [] for j in feats}
    acw = {j: [] for j in feats}
    rr_terms = []
    rr_w = []
    m_all = len(feats)
    for base in bases:
        base_set = set(base)
        err_base = _mean(engine.errors(base, [target])[target][0])
        rr_terms.append(err_base)
        rr_w.append(_size_weight(len(base), m_all) if exhaustive else 1.0)
        for j in feats:
            if j in base_set:
                continue
            if not exhaustive and rng.random() > 0.5:
                continue  # thin the pairings when sampling
            err_with = _mean(
                engine.errors(tuple(sorted(base_set | {j})),
                              [target])[target][0])
            ac[j].append(err_with - err_base)
            acw[j].append(
                _size_weight(len(base), m_all - 1) if exhaustive else 1.0)
    rr = _weighted_nanmean(rr_terms, rr_w)
    out = {j: (_weighted_nanmean(v, acw[j]) if v else 0.0)
           for j, v in ac.items()}
    return out, rr


def prediction_contributions(view, spec, target, context_features=None,
                             rng=None,
                             n_samples=DEFAULT_COALITION_SAMPLES,
                             n_rows=DEFAULT_EVAL_ROWS,
                             exhaustive_limit=EXHAUSTIVE_LIMIT):
    """Directional and absolute prediction contributions of each feature.

    The directional contribution is the expected signed change of the
    prediction when the feature joins a coalition; the absolute
    contribution averages the magnitude of that change per evaluated
    case.  Returns (dpc, apc).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    feats = [f for f in (context_features or view.feature_names)
             if f != target]
    engine = CoalitionEngine(view, spec, _eval_rows(view, rng, n_rows), rng)
    bases, exhaustive = _coalitions(feats, rng, n_samples, exhaustive_limit)
    dpc = {j: [] for j in feats}
    apc = {j: [] for j in feats}
    ws = {j: [] for j in feats}
    m = len(feats) - 1
    for base in bases:
        base_set = set(base)
        _, pred_base = engine.errors(base, [target])[target]
        for j in feats:
            if j in base_set:
                continue
            if not exhaustive and rng.random() > 0.5:
                continue
            _, pred_with = engine.errors(
                tuple(sorted(base_set | {j})), [target])[target]
            diff = pred_with - pred_base
            ok = np.isfinite(diff)
            if ok.any():
                dpc[j].append(float(diff[ok].mean()))
                apc[j].append(float(np.abs(diff[ok]).mean()))
                ws[j].append(
                    _size_weight(len(base), m) if exhaustive else 1.0)
    return ({j: (_weighted_nanmean(v, ws[j]) if v else 0.0)
             for j, v in dpc.items()},
            {j: (_weighted_nanmean(v, ws[j]) if v else 0.0)
             for j, v in apc.items()})


def robust_residual(view, spec, target, **kw):
    """Expected prediction error of the target over random coalitions."""
    _, rr = accuracy_contributions(view, spec, target, **kw)
    return rr


def influence_probabilities(ac_column):
    """Probability that each feature influences the target, from its
    accuracy contributions.

    Only error reductions count; the reductions are normalized into a
    probability column.  A feature that changes nothing gets (nearly)
    zero mass before normalization.
    """
    q = {j: max(-v, 0.0) for j, v in ac_column.items()}
    total = sum(q.values())
    if total <= 0:
        n = max(len(q), 1)
        return {j: 1.0 / n for j in q}
    floor = 1e-9 * total
    q = {j: v + floor for j, v in q.items()}
    total = sum(q.values())
    return {j: v / total for j, v in q.items()}


def interpretable_contribution(ac, rr):
    """Accuracy contribution rescaled into nats against the robust
    residual, so contributions are comparable across targets.
    """
    rr = max(rr, 1e-300)
    u = ac / rr
    return u + 0.5 * math.exp(-u) * (3.0 + u) - 1.5


def mismatch_class_ratio(model, name):
    """Residual-to-deviation ratio of a feature; large values mean the
    feature is poorly predictable from the others relative to its own
    noise level.
    """
    dev = model.spec[name]
    r = model.residuals.get(name, 0.0)
    if dev.kind == "nominal":
        scale = max(1.0 - dev.match_prob, 1e-12)
    else:
        scale = max(dev.scale, 1e-300)
    return r / scale


def causal_asymmetries(view, model, features=None, rng=None,
                       threshold=EDGE_THRESHOLD_NATS,
                       undirected_mcr=UNDIRECTED_MCR, **kw):
    """Directed relationships suggested by contribution asymmetry.

    For each ordered pair the interpretable accuracy contribution is
    computed in both directions; the asymmetry IAAC(j, t) =
    IAC(t, j) - IAC(j, t) is positive when t carries more usable
    information about j than j carries about t, suggesting j -> t.
    Pairs whose asymmetry magnitude
    stays below ``threshold`` nats yield no edge; pairs where both
    features have a residual-to-deviation ratio above ``undirected_mcr``
    yield an undirected edge.

    Returns dict with "iac", "iaac", "mcr" and "edges" (list of
    (source, target, kind) with kind "directed" or "undirected").
    """
    rng = np.random.default_rng(0) if rng is None else rng
    feats = list(features or view.feature_names)
    iac = {}
    for t in feats:
        ac, rr = accuracy_contributions(
            view, model.spec, t, context_features=feats, rng=rng, **kw)
        for j in feats:
            if j != t:
                iac[(j, t)] = interpretable_contribution(ac[j], rr)
    iaac = {}
    for j, t in itertools.permutations(feats, 2):
        iaac[(j, t)] = iac[(t, j)] - iac[(j, t)]
    mcr = {f: mismatch_class_ratio(model, f) for f in feats}
    edges = []
    for a, b in itertools.combinations(feats, 2):
        v = iaac[(a, b)]
        if abs(v) <= threshold:
            continue
        if mcr[a] > undirected_mcr and mcr[b] > undirected_mcr:
            edges.append((a, b, "undirected"))
        elif v > 0:
            edges.append((a, b, "directed"))
        else:
            edges.append((b, a, "directed"))
    return {"iac": iac, "iaac": iaac, "mcr": mcr, "edges": edges}
