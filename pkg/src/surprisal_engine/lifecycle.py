"""Case-weight lifecycle: ablation during training, batch reduction and
rebalancing.

A well-covered region of the case space does not need every record:
incoming cases that are both typical of their neighborhood (low influence
entropy relative to their neighbors) and add no marginal surprisal are
not stored; their unit of probability mass is credited to the cases that
would have predicted them.  Reduction applies the same retention test to
already-stored cases in batches.  Total probability mass is conserved by
every operation here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._batch import BatchPredictor, total_matrix
from .metric import case_surprisal_matrix
from .query import influential_cases, encode_context

RETENTION_QUANTILE = 1.0 - 1.0 / math.e
REDUCTION_TARGET_FRACTION = 1.0 / math.e


@dataclass
class AblationPolicy:
    min_trained_cases: int = 1000
    reduction_target_fraction: float = REDUCTION_TARGET_FRACTION
    batch_size: int = 64
    retention_quantile: float = RETENTION_QUANTILE
    strict: bool = False   # ablate when either criterion fails

    def __post_init__(self):
        if not (0.0 < self.reduction_target_fraction < 1.0):
            raise ValueError("reduction target fraction must be in (0, 1)")
        if self.min_trained_cases < 1:
            raise ValueError("min_trained_cases must be >= 1")


def influence_entropy_of(surprisals, probs):
    """Sum of P * I over an influential set (unnormalized P)."""
    return float(np.dot(probs, surprisals))


def influence_entropy(view, spec, case_context, exclude=None, rng=None):
    """Influence entropy of a query case against the store."""
    res = influential_cases(view, case_context, spec, exclude=exclude,
                            rng=rng)
    if len(res.indices) <= 1:
        return 0.0, res
    return influence_entropy_of(res.surprisals, res.raw_probability), res


def _neighbor_entropies(view, spec, indices, rng):
    """Influence entropy of stored cases, self-excluded."""
    bp = BatchPredictor(view, np.asarray(indices), rng=rng)
    T = bp.total(view.feature_names, spec)
    order, probs, mask = bp.neighborhoods(T)
    T_sorted = np.take_along_axis(T, order, axis=1)
    pw = probs * mask
    contrib = np.where(mask & np.isfinite(T_sorted), pw * T_sorted, 0.0)
    return contrib.sum(axis=1)


def _retained(view, spec, surprisals, probs, neighbor_idx, rng,
              quantile=RETENTION_QUANTILE, strict=False,
              own_entropy=None):
    """Evaluate the two retention criteria for one case.

    Criterion 1: the case's influence entropy reaches the configured
    quantile of its neighbors' entropies.  Criterion 2: the case's
    smallest surprisal to any influential case exceeds the largest
    pairwise surprisal among those influential cases.
    """
    if len(neighbor_idx) <= 1:
        return True, (True, True)
    H_i = influence_entropy_of(surprisals, probs) \
        if own_entropy is None else own_entropy
    H_n = _neighbor_entropies(view, spec, neighbor_idx, rng)
    crit1 = H_i >= np.quantile(H_n, quantile)
    pair = total_matrix(view, neighbor_idx, view.feature_names, spec)
    pair = pair[:, neighbor_idx]
    np.fill_diagonal(pair, -np.inf)
    max_pair = float(pair.max())
    crit2 = float(surprisals.min()) > max_pair
    retained = (crit1 and crit2) if strict else (crit1 or crit2)
    return retained, (bool(crit1), bool(crit2))


def train_with_ablation(store, model, case, policy=None, rng=None,
                        session="default"):
    """Train one case, or accrue its mass onto its influential cases.

    Before ``min_trained_cases`` are stored every case is trained.  After
    warm-up the case is stored only when retained; otherwise its unit
    mass is split across its influential cases in proportion to their
    normalized influence.  Returns ("trained", index) or
    ("ablated", {index: mass}).
    """
    policy = policy or AblationPolicy()
    rng = np.random.default_rng(0) if rng is None else rng
    if len(store) < policy.min_trained_cases or model is None:
        count, rejections = store.train([case], session=session)
        if rejections:
            raise ValueError(rejections[0][1])
        return "trained", len(store) - 1
    view = store.snapshot()
    enc = encode_context(view, {k: v for k, v in case.items()})
    res = influential_cases(view, case, model.spec, rng=rng)
    retained, _ = _retained(view, model.spec, res.surprisals,
                            res.raw_probability, res.indices, rng,
                            quantile=policy.retention_quantile,
                            strict=policy.strict)
    if retained:
        count, rejections = store.train([case], session=session)
        if rejections:
            raise ValueError(rejections[0][1])
        return "trained", len(store) - 1
    share = res.influence
    weights = np.asarray(store.weights)
    recipients = {}
    for i, s in zip(res.indices, share):
        weights[i] += s
        recipients[int(i)] = float(s)
    store.set_weights(weights)
    return "ablated", recipients


def reduce(store, model, policy=None, rng=None):
    """Batch-remove retention-failing cases down to the target size.

    Each batch removes up to ``batch_size`` of the lowest-entropy
    failing cases, crediting each removed case's full weight to its
    influential survivors.  Stops early (with a warning) when every
    remaining case is retained.  Returns a report dict.
    """
    policy = policy or AblationPolicy()
    rng = np.random.default_rng(0) if rng is None else rng
    target = max(int(math.ceil(len(store) *
                               policy.reduction_target_fraction)), 2)
    removed_total = []
    mass_flows = []
    stopped_early = False
    while len(store) > target:
        view = store.snapshot()
        n = view.n
        chunk = max(1, int(1e7 // max(n, 1)))
        H = np.empty(n)
        min_I = np.empty(n)
        neigh = [None] * n
        neigh_probs = [None] * n
        # The neighborhood cross-surprisal check reuses the pass's full
        # surprisal matrix when it fits in memory; large redundant
        # neighborhoods make recomputing each submatrix quadratic.
        T_full = None
        if n * n * 4 <= 1.5e9:
            T_full = np.empty((n, n), dtype=np.float32)
        for start in range(0, n, chunk):
            rows = np.arange(start, min(start + chunk, n))
            bp = BatchPredictor(view, rows, rng=rng)
            T = bp.total(view.feature_names, model.spec)
            if T_full is not None:
                T_full[rows] = T
            order, probs, mask = bp.neighborhoods(T)
            T_sorted = np.take_along_axis(T, order, axis=1)
            pw = probs * mask
            finite = np.isfinite(T_sorted)
            H[rows] = np.where(mask & finite, pw * T_sorted, 0.0) \
                .sum(axis=1)
            for ri, i in enumerate(rows):
                sel = mask[ri]
                neigh[i] = order[ri][sel]
                neigh_probs[i] = probs[ri][sel]
                min_I[i] = T_sorted[ri][sel].min() if sel.any() else np.inf
        crit1 = np.zeros(n, dtype=bool)
        crit2 = np.zeros(n, dtype=bool)
        for i in range(n):
            ns = neigh[i]
            if len(ns) <= 1:
                crit1[i] = crit2[i] = True
                continue
            crit1[i] = H[i] >= np.quantile(H[ns],
                                           policy.retention_quantile)
            if T_full is not None:
                sub = T_full[np.ix_(ns, ns)].astype(np.float64)
            else:
                sub = total_matrix(view, ns, view.feature_names,
                                   model.spec, cols_subset=ns)
            np.fill_diagonal(sub, -np.inf)
            crit2[i] = min_I[i] > float(sub.max())
        retained = (crit1 & crit2) if policy.strict else (crit1 | crit2)
        failing = np.nonzero(~retained)[0]
        if len(failing) == 0:
            stopped_early = True
            warnings.warn("reduction stopped early: every remaining case "
                          "satisfies a retention criterion")
            break
        batch = failing[np.argsort(H[failing], kind="stable")]
        batch = batch[:min(policy.batch_size, len(store) - target)]
        batch_set = set(batch.tolist())
        weights = np.asarray(store.weights)
        for i in batch:
            keep_mask = np.array([m not in batch_set for m in neigh[i]])
            if keep_mask.any():
                sel = np.asarray(neigh[i])[keep_mask]
                p = np.asarray(neigh_probs[i])[keep_mask]
            else:
                sel = np.asarray([m for m in range(n)
                                  if m not in batch_set and m != i])
                if len(sel) == 0:
                    continue
                p = np.ones(len(sel))
            p = p / p.sum() if p.sum() > 0 else \
                np.full(len(sel), 1.0 / len(sel))
            weights[sel] += weights[i] * p
            mass_flows.append((int(i), {int(m): float(weights[i] * q)
                                        for m, q in zip(sel, p)}))
        keep = [i for i in range(n) if i not in batch_set]
        removed_total.extend(int(i) for i in batch)
        new_weights = weights[keep]
        store.remove(batch.tolist())
        store.set_weights(new_weights)
    return {
        "removed": removed_total,
        "mass_flows": mass_flows,
        "final_size": len(store),
        "target": target,
        "stopped_early": stopped_early,
    }


def rebalance(store, feature, mode="inverse_share"):
    """Rebalance case weights over the classes of a nominal feature.

    ``inverse_share`` (default) divides each case's weight by its class's
    share of the total mass, evening classes out; ``share`` applies the
    multiplication as printed in the source formula, which amplifies
    majority classes.  Total mass is preserved by renormalization.
    """
    att = store.feature_map.get(feature)
    if att is None or att.kind != "nominal":
        raise ValueError("rebalancing requires a nominal feature")
    view = store.snapshot()
    col = view.cols[feature]
    w = np.asarray(store.weights, dtype=np.float64)
    total = w.sum()
    shares = np.empty(len(w))
    for c in np.unique(col.data):
        mask = col.data == c
        shares[mask] = w[mask].sum() / total
    if mode == "share":
        w = w * shares
    elif mode == "inverse_share":
        w = w / np.maximum(shares, 1e-300)
    else:
        raise ValueError("unknown rebalance mode %r" % mode)
    w = w * (total / w.sum())
    store.set_weights(w)
    return w
