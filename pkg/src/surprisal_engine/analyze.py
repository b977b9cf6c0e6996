"""Uncertainty analysis: deviations, residuals and influence weights.

Deviations measure how uncertain an observed value is: each feature value
of a sampled case is predicted from the full context (including the value
itself), and the deviation is the expected error of that self-inclusive
prediction.  Because deviations change the metric, the procedure iterates
to convergence.  Residuals are the expected error when predicting a
feature *without* itself.  Influence probabilities are derived from
accuracy contributions and weight context features during targeted
queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import insight
from ._batch import BatchPredictor
from .metric import DeviationSpec, initial_deviations

CONVERGENCE_TOL = 1e-3
MAX_ITERATIONS = 10
DEFAULT_SAMPLE = 1000

GRID_P = (0.1, 0.5, 1.0, 2.0)
GRID_K = (1, 2, 3, 5, 8, 13, 21)


@dataclass
class UncertaintyModel:
    """Result of analyzing a store snapshot."""

    spec: DeviationSpec
    residuals: dict = field(default_factory=dict)
    robust_residuals: dict = field(default_factory=dict)
    feature_probs: dict = field(default_factory=dict)  # target -> {feat: q}
    targeted: dict = field(default_factory=dict)       # target -> config
    version: int = -1
    iterations: int = 0
    converged: bool = False
    _case_residuals: dict = field(default_factory=dict, repr=False)

    def query_config(self, target, context_features):
        """(q_weights, p, fixed_k) to use when inferring ``target``."""
        q_weights = self.context_weights(target, context_features)
        cfg = self.targeted.get(target)
        if cfg:
            return q_weights, cfg.get("p", 1.0), cfg.get("k")
        return q_weights, 1.0, None

    def context_weights(self, target, context_features):
        """Influence weights of the active context features for a target.

        Weights start from the learned influence probabilities; the mass
        of inactive features is redistributed onto the active ones in
        proportion to how strongly each active feature influences the
        inactive one.  Without learned probabilities all weights are 1.
        """
        qcol = self.feature_probs.get(target)
        active = [f for f in context_features if f != target]
        if qcol is None or not active:
            return None
        w = {f: qcol.get(f, 0.0) for f in active}
        for j2, mass in qcol.items():
            if j2 in w or j2 == target:
                continue
            sub = self.feature_probs.get(j2, {})
            subw = {f: sub.get(f, 0.0) for f in active}
            s = sum(subw.values())
            if s > 0:
                for f in active:
                    w[f] += mass * subw[f] / s
            else:
                for f in active:
                    w[f] += mass / len(active)
        total = sum(w.values())
        if total <= 0:
            return None
        return {f: v / total for f, v in w.items()}

    def case_residual(self, view, name, index):
        """Residual of one stored case's feature, from its neighborhood."""
        arr = self.case_residuals(view, name)
        r = arr[index]
        return float(r) if np.isfinite(r) else self.residuals.get(name, 0.0)

    def case_residuals(self, view, name):
        key = (view.version, name)
        if key not in self._case_residuals:
            self._case_residuals = {
                k: v for k, v in self._case_residuals.items()
                if k[0] == view.version}
            self._case_residuals[key] = _case_residuals(view, self, name)
        return self._case_residuals[key]

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "residuals": self.residuals,
            "robust_residuals": self.robust_residuals,
            "feature_probs": self.feature_probs,
            "targeted": self.targeted,
            "version": self.version,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(spec=DeviationSpec.from_dict(d["spec"]),
                   residuals=d["residuals"],
                   robust_residuals=d["robust_residuals"],
                   feature_probs=d["feature_probs"],
                   targeted=d["targeted"], version=d["version"],
                   iterations=d["iterations"], converged=d["converged"])


def _dev_summary(dev):
    if dev.kind == "nominal":
        return 1.0 - dev.match_prob
    return dev.scale


def _update_deviation(view, name, dev, pred, resid, actual_err):
    """New deviation for one feature from self-inclusive predictions."""
    if dev.kind == "nominal":
        ok = np.isfinite(actual_err)
        if ok.any():
            err = float(np.mean(actual_err[ok]))
        else:
            err = 1.0 - dev.match_prob
        n = max(view.n, 1)
        err = min(max(err, 1.0 / (n + 0.5)), 1.0 - 1.0 / (n + 0.5))
        dev.match_prob = 1.0 - err
        dev.mismatch_prob = err / max(dev.n_classes - 1, 1)
    else:
        ok = np.isfinite(actual_err)
        if ok.any():
            dev.scale = float(np.mean(actual_err[ok]))
    return dev.clamp()


DEVIATION_NEIGHBORS = 30


def _prediction_errors(view, spec, bp, features, k=DEVIATION_NEIGHBORS):
    """Self-inclusive prediction error arrays per feature.

    The deviation pass predicts each value from a fixed-size,
    uniformly-weighted neighborhood ranked by the current metric.  A
    fixed neighborhood pins the update at the k-nearest-neighbor error
    scale: exactly substitutable values (duplicated columns) still drive
    the deviation to its floor, while a feature whose deviation merely
    drifts low cannot lock the whole metric onto its own
    matching precision.
    """
    T = bp.total(features, spec)
    order = np.argsort(T, axis=1, kind="stable")
    k = min(k, max(order.shape[1] - 1, 1))
    near = order[:, :k]
    errs = {}
    preds = {}
    for name in features:
        col = view.cols[name]
        actual = col.data[bp.rows]
        vals = col.data[near]
        if col.kind == "nominal":
            votable = vals >= 0
            pred = np.full(len(near), -1)
            for i in range(len(near)):
                v = vals[i][votable[i]]
                if len(v):
                    codes, counts = np.unique(v, return_counts=True)
                    pred[i] = codes[np.argmax(counts)]
            err = np.where((actual >= 0) & (pred >= 0),
                           (pred != actual).astype(float), np.nan)
        else:
            has_vals = ~np.all(np.isnan(vals), axis=1)
            pred = np.full(len(vals), np.nan)
            if has_vals.any():
                pred[has_vals] = np.nanmean(vals[has_vals], axis=1)
            err = np.abs(pred - actual)
        errs[name] = err
        preds[name] = (pred, None)
    return errs, preds


def _residuals(view, spec, bp, features, rng):
    """Expected self-excluded prediction error per feature."""
    T = bp.total(features, spec)
    out = {}
    for name in features:
        Tm = T - bp.feature_matrix(name, spec)
        Tm[np.arange(len(bp.rows)), bp.rows] = np.inf
        order, probs, mask = bp.neighborhoods(Tm)
        col = view.cols[name]
        actual = col.data[bp.rows]
        pred, resid, _ = bp.predict(name, order, probs, mask)
        if col.kind == "nominal":
            vals = col.data[order]
            votable = (vals >= 0) & mask
            pw = probs * votable
            denom = np.maximum(pw.sum(axis=1), 1e-300)
            m_act = (pw * (vals == actual[:, None])).sum(axis=1) / denom
            err = np.where(actual >= 0, 1.0 - m_act, np.nan)
        else:
            err = np.abs(pred - actual)
        ok = np.isfinite(err)
        out[name] = float(err[ok].mean()) if ok.any() else 0.0
    return out


def _case_residuals(view, model, name):
    """Self-excluded residual of feature ``name`` for every stored case."""
    rows = np.arange(view.n)
    bp = BatchPredictor(view, rows, rng=np.random.default_rng(7))
    features = [f for f in view.feature_names if f != name]
    out = np.full(view.n, np.nan)
    chunk = max(1, int(2e6 // max(view.n, 1)))
    for start in range(0, view.n, chunk):
        sub = BatchPredictor(view, rows[start:start + chunk],
                             rng=np.random.default_rng(7))
        T = sub.total(features, model.spec)
        order, probs, mask = sub.neighborhoods(T)
        pred, resid, _ = sub.predict(name, order, probs, mask)
        if view.cols[name].kind == "nominal":
            out[start:start + chunk] = resid
        else:
            out[start:start + chunk] = resid
    return out


def analyze(store, sample_size=DEFAULT_SAMPLE, max_iterations=MAX_ITERATIONS,
            tol=CONVERGENCE_TOL, targets=None, grid_search=False,
            seed=0, coalition_samples=insight.DEFAULT_COALITION_SAMPLES,
            eval_rows=insight.DEFAULT_EVAL_ROWS):
    """Analyze the store: converge deviations, then estimate residuals,
    robust residuals and (for the requested targets) influence
    probabilities and optionally a tuned query configuration.
    """
    view = store.snapshot() if hasattr(store, "snapshot") else store
    rng = np.random.default_rng(seed)
    spec = initial_deviations(view)
    features = view.feature_names
    model = UncertaintyModel(spec=spec, version=view.version)
    if view.n < 2:
        return model

    rows = np.arange(view.n) if view.n <= sample_size else \
        np.sort(rng.choice(view.n, size=sample_size, replace=False))

    converged = False
    iterations = 0
    for it in range(max_iterations):
        iterations = it + 1
        bp = BatchPredictor(view, rows, rng=rng)
        errs, _ = _prediction_errors(view, spec, bp, features)
        max_rel = 0.0
        for name in features:
            dev = spec[name]
            before = _dev_summary(dev)
            _update_deviation(view, name, dev, None, None, errs[name])
            after = _dev_summary(dev)
            denom = max(abs(before), abs(after), 1e-12)
            max_rel = max(max_rel, abs(after - before) / denom)
        if max_rel < tol:
            converged = True
            break
    model.iterations = iterations
    model.converged = converged

    bp = BatchPredictor(view, rows, rng=rng)
    model.residuals = _residuals(view, spec, bp, features, rng)

    wanted = list(targets) if targets is not None else []
    engine_rows = insight._eval_rows(view, rng, eval_rows)
    engine = insight.CoalitionEngine(view, spec, engine_rows, rng)
    for t in wanted:
        ac, rr = insight.accuracy_contributions(
            view, spec, t, rng=rng, n_samples=coalition_samples,
            n_rows=eval_rows, engine=engine)
        model.robust_residuals[t] = rr
        model.feature_probs[t] = insight.influence_probabilities(ac)
        if grid_search:
            model.targeted[t] = _grid_search(view, model, t, rng)
            # second pass, as the tuned configuration changes the metric
            model.targeted[t] = _grid_search(view, model, t, rng)
    return model


def _grid_search(view, model, target, rng, n_eval=150):
    """Pick (p, k) minimizing leave-one-out error for one target."""
    from .metric import case_surprisal_matrix
    rows = insight._eval_rows(view, rng, n_eval)
    features = [f for f in view.feature_names if f != target]
    q_weights = model.context_weights(target, features)
    col = view.cols[target]
    actual = col.data[rows]
    best = None
    for p in GRID_P:
        queries = []
        for i in rows:
            queries.append({f: view.cols[f].data[i] for f in features})
        T = case_surprisal_matrix(view, queries, features, model.spec,
                                  q_weights=q_weights, p=p)
        T[np.arange(len(rows)), rows] = np.inf
        for k in GRID_K:
            if k >= view.n:
                continue
            from ._batch import bandwidth_mask
            order, probs, mask = bandwidth_mask(
                T, view.weights, rng=np.random.default_rng(0), fixed_k=k)
            bp = BatchPredictor(view, rows, rng=rng)
            pred, resid, _ = bp.predict(target, order, probs, mask)
            if col.kind == "nominal":
                ok = actual >= 0
                score = float(np.mean((pred[ok] != actual[ok])))
            else:
                ok = np.isfinite(actual) & np.isfinite(pred)
                score = float(np.mean(np.abs(pred[ok] - actual[ok]))) \
                    if ok.any() else np.inf
            if best is None or score < best[0]:
                best = (score, {"p": p, "k": int(k)})
    return best[1] if best else {"p": 1.0, "k": None}
