"""Synthetic data generation with optional differential privacy and
anonymity auditing.

Each synthetic case is built by visiting the features in a fresh random
order and conditioning every draw on the values generated so far.  The
conviction mode reuses the generative react; the DP mode swaps in a
Laplace mechanism for continuous features and a branch draw for nominal
features whose escape probabilities are controlled by epsilon.  Because
no model is produced, a DP synthesis spends its entire budget at once: a
second run against the same snapshot requires an explicit override.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .query import influential_cases
from .react import react
from ._batch import total_matrix
from .metric import case_surprisal_matrix

RETRY_CAP = 16


@dataclass
class SynthConfig:
    mode: str = "conviction"         # "conviction" or "dp"
    conviction: float = 1.0
    epsilon: float = 1.0
    anonymity: str = "off"           # "off", "min-ratio", "max-ratio"
    rejection_threshold: float = 0.0
    seed: int = 0
    retry_cap: int = RETRY_CAP

    def __post_init__(self):
        if self.mode not in ("conviction", "dp"):
            raise ValueError("mode must be 'conviction' or 'dp'")
        if self.mode == "dp" and not self.epsilon > 0:
            raise ValueError("epsilon must be positive in dp mode")
        if self.anonymity not in ("off", "min-ratio", "max-ratio"):
            raise ValueError("unknown anonymity mode %r" % self.anonymity)


class BudgetLedger:
    """Records which store snapshots have spent their DP budget."""

    def __init__(self, path=None):
        self.path = path
        self.spent = {}
        if path is not None:
            try:
                with open(path) as fh:
                    self.spent = json.load(fh)
            except FileNotFoundError:
                pass

    @staticmethod
    def snapshot_id(view):
        return "%d:%d:%d" % (view.version, view.n, len(view.features))

    def is_spent(self, view):
        return self.snapshot_id(view) in self.spent

    def record(self, view, epsilon):
        self.spent[self.snapshot_id(view)] = {"epsilon": epsilon}
        if self.path is not None:
            with open(self.path, "w") as fh:
                json.dump(self.spent, fh, sort_keys=True)


_default_ledger = BudgetLedger()


def dp_generate_continuous(values, epsilon, feature_range, rng,
                           aggregate=True):
    """Laplace-mechanism draw for a continuous feature.

    ``values`` are the influential cases' observed values.  The noise
    scale is the sensitivity over epsilon, where the sensitivity is at
    least the feature range divided by the number of influential values
    and at least the largest gap between consecutive influential values.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if len(values) == 0:
        raise ValueError("empty influence set")
    sens = feature_range / len(values)
    u = np.sort(np.unique(values))
    if len(u) > 1:
        sens = max(sens, float(np.max(np.diff(u))))
    center = float(values.mean()) if aggregate else \
        float(rng.choice(values))
    return center + rng.laplace(0.0, sens / epsilon), sens


def dp_branch_probabilities(epsilon):
    """(influence, marginal, uniform) branch probabilities.

    p = e^eps / (1 + e^eps); the influence draw happens with probability
    p, the store-marginal escape with p(1-p) and the uniform escape with
    (1-p)^2, so a large epsilon drives both escapes to zero and a tiny
    epsilon approaches (1/2, 1/4, 1/4).
    """
    p = math.exp(epsilon) / (1.0 + math.exp(epsilon))
    return p, p * (1.0 - p), (1.0 - p) ** 2


def dp_generate_nominal(view, name, influential_codes, influential_probs,
                        epsilon, rng, domain=None):
    """Three-branch DP draw for a nominal feature.  Returns
    (decoded value, branch index)."""
    p1, p2, _ = dp_branch_probabilities(epsilon)
    eta = rng.random()
    col = view.cols[name]
    if eta < p1 and len(influential_codes):
        w = np.asarray(influential_probs, dtype=np.float64)
        w = w / w.sum() if w.sum() > 0 else \
            np.full(len(w), 1.0 / len(w))
        code = int(rng.choice(influential_codes, p=w))
        return view.decode_value(name, code), 0
    if eta < p1 + p2:
        ok = col.data >= 0
        if ok.any():
            w = view.weights[ok]
            code = int(rng.choice(col.data[ok], p=w / w.sum()))
            return view.decode_value(name, code), 1
    if domain is None:
        warnings.warn("no declared domain for %r; uniform draw falls "
                      "back to observed values" % name)
        domain = list(col.table)
    return domain[int(rng.integers(len(domain)))], 2


def _feature_range(view, name):
    att = view.feature_map[name]
    declared = att.bounds is not None and None not in att.bounds
    if declared:
        return float(att.bounds[1] - att.bounds[0]), True
    data = view.cols[name].data
    ok = ~np.isnan(data)
    if not ok.any():
        return 1.0, False
    return float(data[ok].max() - data[ok].min()) or 1.0, False


def anonymity_preservation(view, spec, case):
    """AP ratios of one synthetic case against the store.

    Numerators are the smallest/largest nonzero surprisal from the case
    to its influential cases; denominators the smallest/largest nonzero
    pairwise surprisal among those influential cases.  Returns a dict
    with ap_min, ap_max and a defined flag.
    """
    res = influential_cases(view, case, spec)
    if len(res.indices) < 2:
        return {"ap_min": None, "ap_max": None, "defined": False}
    s = res.surprisals
    nz = s[s > 0]
    pair = total_matrix(view, res.indices, view.feature_names, spec,
                        cols_subset=res.indices)
    iu = np.triu_indices(len(res.indices), k=1)
    pv = pair[iu]
    pv = pv[pv > 0]
    if len(pv) == 0:
        return {"ap_min": None, "ap_max": None, "defined": False}
    ap_min = float(nz.min() / pv.min()) if len(nz) else 0.0
    ap_max = float(nz.max() / pv.max()) if len(nz) else 0.0
    return {"ap_min": ap_min, "ap_max": ap_max, "defined": True}


def synthesize_dataset(store, model, n_cases, config=None, ledger=None,
                       override_budget=False):
    """Generate synthetic cases.  Returns (cases, report).

    Every case shuffles the feature order, draws the first feature from
    its marginal and conditions each later feature on the values already
    drawn.  With anonymity checks enabled, cases failing the configured
    ratio threshold are regenerated up to the retry cap and dropped (with
    a report entry) if they keep failing.
    """
    config = config or SynthConfig()
    view = store.snapshot() if hasattr(store, "snapshot") else store
    ledger = ledger or _default_ledger
    if config.mode == "dp":
        if ledger.is_spent(view) and not override_budget:
            raise RuntimeError(
                "privacy budget already spent for this snapshot; pass an "
                "explicit override to synthesize again")
        ledger.record(view, config.epsilon)
    rng = np.random.default_rng(config.seed)
    features = [f for f in view.features if not f.derived]
    branch_counts = [0, 0, 0]
    cases, audits, dropped = [], [], 0
    range_flags = {}
    for _ in range(int(n_cases)):
        accepted = None
        for _attempt in range(config.retry_cap):
            case = _generate_case(view, model, features, config, rng,
                                  branch_counts, range_flags)
            if config.anonymity == "off":
                accepted = (case, None)
                break
            audit = anonymity_preservation(view, model.spec, case)
            key = "ap_min" if config.anonymity == "min-ratio" else "ap_max"
            val = audit.get(key)
            if val is not None and val >= config.rejection_threshold:
                accepted = (case, audit)
                break
        if accepted is None:
            dropped += 1
            continue
        cases.append(accepted[0])
        if accepted[1] is not None:
            audits.append(accepted[1])
    report = {
        "mode": config.mode,
        "requested": int(n_cases),
        "emitted": len(cases),
        "dropped": dropped,
        "branch_counts": branch_counts,
        "observed_range_fallback": sorted(
            k for k, v in range_flags.items() if not v),
    }
    if audits:
        mins = [a["ap_min"] for a in audits if a["ap_min"] is not None]
        if mins:
            report["ap_min_worst"] = min(mins)
            report["ap_min_geometric_mean"] = float(
                np.exp(np.mean(np.log(np.maximum(mins, 1e-300)))))
    return cases, report


def _generate_case(view, model, features, config, rng, branch_counts,
                   range_flags):
    order = list(rng.permutation(len(features)))
    context = {}
    for fi in order:
        att = features[fi]
        name = att.name
        if config.mode == "conviction":
            rx = react(view, model, context, [name], mode="generative",
                       conviction=config.conviction, rng=rng)
            context[name] = rx.values[name]
            continue
        q_weights, p, kk = model.query_config(name, list(context))
        res = influential_cases(view, context, model.spec,
                                q_weights=q_weights, p=p, k=kk, rng=rng)
        col = view.cols[name]
        if col.kind == "nominal":
            codes = col.data[res.indices]
            ok = codes >= 0
            value, branch = dp_generate_nominal(
                view, name, codes[ok], res.raw_probability[ok],
                config.epsilon, rng, domain=att.domain)
            branch_counts[branch] += 1
            context[name] = value
        else:
            vals = col.data[res.indices]
            rng_span, declared = _feature_range(view, name)
            range_flags.setdefault(name, declared)
            try:
                value, _ = dp_generate_continuous(
                    vals, config.epsilon, rng_span, rng)
            except ValueError:
                value = None
            if value is not None and att.bounds is not None:
                lo, hi = att.bounds
                if lo is not None:
                    value = max(value, lo)
                if hi is not None:
                    value = min(value, hi)
            if value is not None and col.kind == "ordinal":
                value = view.decode_value(name, value)
            context[name] = value
    return context
