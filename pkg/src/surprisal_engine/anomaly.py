"""Anomaly measurement and similarity-conviction clustering.

The surprisal contribution of a case is the expected surprisal of the
case given its influential neighbors; dividing the neighbors' expected
contribution by the case's own contribution gives similarity conviction,
which is below 1 for cases that stick out from their surroundings.
Clustering seeds from the most self-consistent cases and grows clusters
through mutual influence; the anomaly pipeline combines the per-case
convictions with group-level statistics of small clusters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._batch import BatchPredictor

# Defaults for clustering and the anomaly pipeline.
EXPANSION_THRESHOLD = 0.75
INCLUSION_RELATIVE_THRESHOLD = 1.5
SMALL_CLUSTER_FRACTION = 0.15
ANOMALY_CONVICTION_FLAG = 0.5


@dataclass
class CaseStats:
    """Per-case neighborhood statistics over the full feature context."""

    neighbors: list          # arrays of influential case indices
    influence: list          # matching normalized influence weights
    surprisal_contribution: np.ndarray   # S_i
    similarity_conviction: np.ndarray    # SC_i (== sigma_i)


def case_statistics(view, spec, rng=None, chunk=512):
    """Influence sets, surprisal contributions and similarity convictions
    for every stored case.

    The surprisal contribution S_i is the influence-weighted expected
    surprisal of case i against its influential cases (self excluded).
    Similarity conviction compares the same expectation taken over the
    neighbors' own contributions to S_i; the two printed forms of this
    ratio coincide, so a single quantity backs both names.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = view.n
    features = view.feature_names
    neighbors = [None] * n
    influence = [None] * n
    S = np.zeros(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        bp = BatchPredictor(view, rows, rng=rng)
        T = bp.total(features, spec)
        order, probs, mask = bp.neighborhoods(T)
        T_sorted = np.take_along_axis(T, order, axis=1)
        pw = probs * mask
        denom = np.maximum(pw.sum(axis=1), 1e-300)
        infl = pw / denom[:, None]
        with np.errstate(invalid="ignore"):
            weighted = np.where(mask, infl * T_sorted, 0.0)
        S[rows] = np.where(mask.any(axis=1), np.nansum(weighted, axis=1), 0.0)
        for ri, i in enumerate(rows):
            sel = mask[ri]
            neighbors[i] = order[ri][sel]
            influence[i] = infl[ri][sel]
    SC = np.ones(n)
    for i in range(n):
        if len(neighbors[i]) == 0 or S[i] <= 0:
            SC[i] = np.inf if len(neighbors[i]) else 1.0
            continue
        expected = float(np.dot(influence[i], S[neighbors[i]]))
        SC[i] = expected / S[i]
    return CaseStats(neighbors, influence, S, SC)


# ----------------------------------------------------------------------
# Clustering

def cluster(view, stats, expansion_threshold=EXPANSION_THRESHOLD,
            inclusion_relative_threshold=INCLUSION_RELATIVE_THRESHOLD):
    """Similarity-conviction clustering.  Returns labels (-1 unclustered).

    Clusters seed from cases with conviction >= 1 in descending order and
    expand through the influence graph: a neighbor already in another
    cluster whose own influence set contains the seed merges the
    clusters; unclustered neighbors above the expansion threshold join
    and expand in turn, deferring to whichever cluster holds the most of
    their influence when several touch them.  Remaining cases attach to
    the single cluster among their neighbors while their conviction stays
    below the inclusion threshold times the cluster's maximum.
    """
    n = view.n
    SC = stats.similarity_conviction
    labels = np.full(n, 0, dtype=int)  # 0 = unassigned during the run
    neighbor_sets = [set(ns.tolist()) for ns in stats.neighbors]

    def relabel(old, new):
        labels[labels == old] = new

    def expand(seed, cid):
        stack = [seed]
        seen = set()
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            candidates = [int(m) for m in stats.neighbors[i]
                          if labels[m] != cid]
            for m in candidates:
                if labels[m] > 0 and i in neighbor_sets[m]:
                    relabel(labels[m], cid)
            grow = [m for m in candidates
                    if labels[m] == 0 and SC[m] >= expansion_threshold]
            grow_set = set(grow)
            for m in grow:
                neighbor_labels = {int(labels[z]) for z in stats.neighbors[m]
                                   if labels[z] > 0}
                if len(neighbor_labels - {cid}) > 0:
                    if any(labels[z] == 0 and int(z) in grow_set
                           for z in stats.neighbors[m]):
                        continue
                    mass = {}
                    for z, p in zip(stats.neighbors[m], stats.influence[m]):
                        lz = int(labels[z])
                        if lz > 0:
                            mass[lz] = mass.get(lz, 0.0) + p
                    best = max(sorted(mass), key=lambda c: mass[c])
                    if best != cid:
                        labels[m] = best
                        continue
                labels[m] = cid
                stack.append(m)

    order = np.argsort(-SC, kind="stable")
    cid = 0
    for i in order:
        if SC[i] < 1.0:
            break
        if labels[i] != 0:
            continue
        cid += 1
        labels[i] = cid
        expand(int(i), cid)

    # attach remaining cases
    def max_sigma(c):
        return SC[labels == c].max()

    max_sig = {c: max_sigma(c) for c in np.unique(labels) if c > 0}
    changed = True
    while changed:
        changed = False
        unclustered = [int(i) for i in np.argsort(SC, kind="stable")
                       if labels[i] == 0]
        for i in unclustered:
            cs = {int(labels[z]) for z in stats.neighbors[i]
                  if labels[z] > 0}
            if len(cs) != 1:
                continue
            c = cs.pop()
            if SC[i] < inclusion_relative_threshold * max_sig[c]:
                labels[i] = c
                max_sig[c] = max(max_sig[c], SC[i])
                changed = True
    labels[labels == 0] = -1
    return labels


# ----------------------------------------------------------------------
# Group anomalousness

def average_group_surprisal(view, stats, group_mask):
    """Total surprisal contribution of a group divided by its mass."""
    w = view.weights[group_mask]
    if w.sum() <= 0:
        return 0.0
    return float(stats.surprisal_contribution[group_mask].sum() / w.sum())


def group_divergence(stats, group_mask):
    """Divergence of a group's contribution distribution from the
    exponential reference whose mean is the global expectation.

    Both the group's contributions and the reference are summarized as
    exponential distributions, for which the divergence has a closed
    form; a group that looks like a typical draw scores near 0.
    """
    global_mean = float(np.mean(stats.surprisal_contribution))
    group_mean = float(np.mean(stats.surprisal_contribution[group_mask]))
    if global_mean <= 0 or group_mean <= 0:
        return 0.0
    ratio = global_mean / group_mean
    return math.log(ratio) + 1.0 / ratio - 1.0


def group_anomalousness(view, stats, by):
    """AGS and distributional divergence per group of a nominal feature."""
    col = view.cols[by]
    out = {}
    for c in np.unique(col.data):
        mask = col.data == c
        name = view.decode_value(by, int(c))
        out[name] = {
            "ags": average_group_surprisal(view, stats, mask),
            "divergence": group_divergence(stats, mask),
            "mass": float(view.weights[mask].sum()),
        }
    return out


# ----------------------------------------------------------------------
# Pipeline

def detect_anomalies(view, spec, rng=None,
                     flag_threshold=ANOMALY_CONVICTION_FLAG,
                     small_cluster_fraction=SMALL_CLUSTER_FRACTION,
                     expansion_threshold=EXPANSION_THRESHOLD,
                     inclusion_relative_threshold=
                     INCLUSION_RELATIVE_THRESHOLD):
    """Full anomaly pass: per-case convictions, clustering and group
    statistics of small clusters; flags cases whose minimum conviction
    falls at or below the threshold.

    Returns dict with "similarity_conviction", "labels",
    "group_conviction", "min_conviction" and "flagged".
    """
    rng = np.random.default_rng(0) if rng is None else rng
    stats = case_statistics(view, spec, rng=rng)
    labels = cluster(view, stats,
                     expansion_threshold=expansion_threshold,
                     inclusion_relative_threshold=
                     inclusion_relative_threshold)
    n = view.n
    global_mean = float(np.mean(stats.surprisal_contribution))
    group_conviction = np.ones(n)
    for c in np.unique(labels):
        mask = labels == c
        small = mask.sum() < small_cluster_fraction * n
        if c == -1 or small:
            ags = average_group_surprisal(view, stats, mask)
            if ags > 0 and global_mean > 0:
                group_conviction[mask] = global_mean / ags
    min_conviction = np.minimum(stats.similarity_conviction,
                                group_conviction)
    return {
        "stats": stats,
        "similarity_conviction": stats.similarity_conviction,
        "labels": labels,
        "group_conviction": group_conviction,
        "min_conviction": min_conviction,
        "flagged": np.nonzero(min_conviction <= flag_threshold)[0],
    }
