"""Aggregate scoring: bootstrap leave-one-out evaluation of a target.

Each draw samples a stored case, predicts its target with the case
excluded from the candidate set and scores the predictions: accuracy,
macro precision/recall/F1 and MCC for nominal targets; MAE, Spearman
correlation and R^2 for continuous targets.
"""

from __future__ import annotations

import numpy as np
from scipy import stats as sstats

from ._batch import BatchPredictor, bandwidth_mask
from .metric import case_surprisal_matrix


def matthews_corrcoef(y_true, y_pred):
    """Multiclass Matthews correlation from the confusion matrix."""
    classes = np.unique(np.concatenate([y_true, y_pred]))
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    C = np.zeros((k, k))
    for t, p in zip(y_true, y_pred):
        C[index[t], index[p]] += 1
    t_k = C.sum(axis=1)
    p_k = C.sum(axis=0)
    c = np.trace(C)
    s = C.sum()
    num = c * s - np.dot(t_k, p_k)
    den = np.sqrt((s * s - np.dot(p_k, p_k)) * (s * s - np.dot(t_k, t_k)))
    return float(num / den) if den > 0 else 0.0


def _macro_prf(y_true, y_pred):
    classes = np.unique(y_true)
    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    return (float(np.mean(precisions)), float(np.mean(recalls)),
            float(np.mean(f1s)))


def react_aggregate(store, model, target, n_draws=500, seed=0):
    """Bootstrap leave-one-out metrics for one target feature."""
    view = store.snapshot() if hasattr(store, "snapshot") else store
    rng = np.random.default_rng(seed)
    col = view.cols[target]
    if col.kind == "nominal":
        valid = np.nonzero(col.data >= 0)[0]
    else:
        valid = np.nonzero(~np.isnan(col.data))[0]
    if len(valid) < 2:
        raise ValueError("not enough labeled cases for %r" % target)
    draws = rng.choice(valid, size=n_draws, replace=True)
    unique = np.unique(draws)
    features = [f for f in view.feature_names if f != target]
    q_weights, p, k = model.query_config(target, features)
    bp = BatchPredictor(view, unique, rng=rng, fixed_k=k)
    if p == 1.0:
        T = bp.total(features, model.spec, q_weights=q_weights)
    else:
        queries = [{f: view.cols[f].data[i] for f in features}
                   for i in unique]
        T = case_surprisal_matrix(view, queries, features, model.spec,
                                  q_weights=q_weights, p=p)
        T[np.arange(len(unique)), unique] = np.inf
    order, probs, mask = bp.neighborhoods(T)
    pred, resid, _ = bp.predict(target, order, probs, mask)
    lookup = {int(i): pred[j] for j, i in enumerate(unique)}
    y_pred = np.array([lookup[int(i)] for i in draws])
    y_true = col.data[draws]
    out = {"target": target, "n_draws": int(n_draws),
           "scheme": "loo-bootstrap"}
    if col.kind == "nominal":
        ok = y_pred >= 0
        acc = float(np.mean((y_pred == y_true) & ok))
        prec, rec, f1 = _macro_prf(y_true[ok], y_pred[ok])
        out.update({
            "accuracy": acc, "precision": prec, "recall": rec, "f1": f1,
            "mcc": matthews_corrcoef(y_true[ok], y_pred[ok]),
        })
    else:
        ok = np.isfinite(y_pred)
        err = np.abs(y_pred[ok] - y_true[ok])
        ss_res = float(np.sum((y_pred[ok] - y_true[ok]) ** 2))
        ss_tot = float(np.sum((y_true[ok] - y_true[ok].mean()) ** 2))
        rho = sstats.spearmanr(y_true[ok], y_pred[ok]).statistic \
            if ok.sum() > 2 else 0.0
        out.update({
            "mae": float(err.mean()),
            "spearman": float(rho) if np.isfinite(rho) else 0.0,
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0,
        })
    return out
