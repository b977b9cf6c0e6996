"""Series support: derived rate/lag features and rolling forecasts.

Continuous features in ordered series get rate features (value delta over
time delta against the in-series predecessor, chained for higher orders)
and lag features repeating previous values.  Forecasting predicts the
nominal features and the highest-order rates from the lagged context,
integrates the rates back down to values, and rolls the window forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schema import FeatureAttribute

MAX_RATE_ORDER = 2


@dataclass
class SeriesConfig:
    time_feature: str
    id_feature: str | None = None
    rate_order: int = 1
    lags: int = 2
    stationary: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.rate_order <= MAX_RATE_ORDER):
            raise ValueError("rate_order must be between 0 and %d"
                             % MAX_RATE_ORDER)
        if self.lags < 0:
            raise ValueError("lags must be >= 0")

    def to_dict(self):
        return {"time_feature": self.time_feature,
                "id_feature": self.id_feature,
                "rate_order": self.rate_order, "lags": self.lags,
                "stationary": list(self.stationary)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def rate_features(self, base):
        out = []
        for order in range(1, self.rate_order + 1):
            suffix = "_rate" if order == 1 else "_rate%d" % order
            out.append((base + suffix, order))
        return out


def _base_features(store, config):
    """Features eligible for rates: continuous, not time/id/derived."""
    out = []
    for f in store.features:
        if f.derived or f.name == config.time_feature or \
                f.name == config.id_feature:
            continue
        if f.kind in ("continuous", "cyclic") and \
                f.name not in config.stationary:
            out.append(f.name)
    return out


def _lag_eligible(store, config):
    return [f.name for f in store.features
            if not f.derived and f.name != config.id_feature
            and f.name not in config.stationary]


def _series_groups(store, config):
    """Case indices per series, ordered by time (ties by train order)."""
    n = len(store)
    times = [store.get_case(i)[config.time_feature] for i in range(n)]
    if config.id_feature is None:
        groups = {None: list(range(n))}
    else:
        groups = {}
        for i in range(n):
            groups.setdefault(
                store.get_case(i)[config.id_feature], []).append(i)
    for key in groups:
        groups[key].sort(key=lambda i: (times[i], i))
    return groups, times


def derive(store, config):
    """Attach derived rate, lag and progress features to the store."""
    store.series_config = None  # avoid recursive rederivation
    old = [f.name for f in store.features if f.derived]
    if old:
        store.drop_features(old)
    groups, times = _series_groups(store, config)
    n = len(store)
    base = _base_features(store, config)
    columns = {}

    for name in base:
        vals = [store.get_case(i)[name] for i in range(n)]
        prev_rate = {i: None for i in range(n)}
        for rate_name, order in config.rate_features(name):
            col = [None] * n
            for _, idx in groups.items():
                for pos, i in enumerate(idx):
                    if pos == 0:
                        continue  # no in-series predecessor: stays NULL
                    p = idx[pos - 1]
                    dt = times[i] - times[p]
                    if dt == 0:
                        continue
                    a = vals[i] if order == 1 else prev_rate[i]
                    b = vals[p] if order == 1 else prev_rate[p]
                    if a is None or b is None:
                        continue
                    col[i] = (a - b) / dt
            columns[rate_name] = col
            prev_rate = {i: col[i] for i in range(n)}

    for name in _lag_eligible(store, config):
        vals = [store.get_case(i)[name] for i in range(n)]
        for lag in range(1, config.lags + 1):
            col = [None] * n
            for _, idx in groups.items():
                for pos, i in enumerate(idx):
                    if pos >= lag:
                        col[i] = vals[idx[pos - lag]]
            columns["%s_lag%d" % (name, lag)] = col

    elapsed = [None] * n
    step = [None] * n
    remaining = [None] * n
    for _, idx in groups.items():
        t0 = times[idx[0]]
        t_end = times[idx[-1]]
        for pos, i in enumerate(idx):
            elapsed[i] = times[i] - t0
            step[i] = float(pos)
            remaining[i] = t_end - times[i]
    columns["series_elapsed"] = elapsed
    columns["series_step"] = step
    columns["series_remaining"] = remaining

    fmap = store.feature_map
    for cname, col in columns.items():
        base_name = cname
        for suffix in ("_rate2", "_rate"):
            if cname.endswith(suffix):
                base_name = cname[: -len(suffix)]
                break
        if "_lag" in cname:
            base_name = cname.split("_lag")[0]
        src = fmap.get(base_name)
        if src is not None and "_lag" in cname:
            att = FeatureAttribute(
                cname, src.kind, allows_null=True,
                cycle_period=src.cycle_period,
                ordinal_ranks=src.ordinal_ranks, domain=src.domain,
                derived=True)
        else:
            att = FeatureAttribute(cname, "continuous", allows_null=True,
                                   derived=True)
        store.add_feature(att, col)
    store.series_config = config
    return store


def rederive(store):
    config = store.series_config
    if config is not None:
        derive(store, config)


def _forecast_context_features(store, config):
    """Features known before the new step's values are observed."""
    out = []
    for f in store.features:
        if f.name == config.time_feature or f.name == config.id_feature:
            continue
        if f.name in config.stationary:
            out.append(f.name)
        elif f.derived and "_lag" in f.name:
            # lags of the time feature itself only encode absolute time,
            # which breaks down as a forecast extrapolates past the
            # stored range; the value lags carry the dynamics
            if f.name.split("_lag")[0] != config.time_feature:
                out.append(f.name)
    return out


def react_series(store, model, history, horizon, mode="discriminative",
                 conviction=1.0, n_samples=1, rng=None, dt=None):
    """Forecast ``horizon`` steps past the provided history.

    ``history`` is a list of case dicts (base features plus the time
    feature), oldest first, at least ``lags + rate_order`` long.  For a
    generative mode with ``n_samples`` > 1, returns per-step means plus a
    mean absolute deviation band; otherwise per-step forecasts.
    """
    from .react import react

    config = store.series_config
    if config is None:
        raise ValueError("store has no series configuration")
    rng = np.random.default_rng(0) if rng is None else rng
    view = store.snapshot()
    base = _base_features(store, config)
    nominals = [f.name for f in store.features
                if not f.derived and f.kind in ("nominal", "ordinal")
                and f.name not in (config.id_feature,)
                and f.name not in config.stationary]
    context_feats = _forecast_context_features(store, config)
    if dt is None:
        times = sorted(h[config.time_feature] for h in history)
        deltas = np.diff(times)
        deltas = deltas[deltas > 0]
        dt = float(np.median(deltas)) if len(deltas) else 1.0

    top_rates = {}
    for name in base:
        rates = config.rate_features(name)
        if rates:
            top_rates[name] = rates[-1]
    actions = [rn for rn, _ in top_rates.values()] + nominals

    def one_rollout(seed_rng):
        hist = [dict(h) for h in history]
        rates = {name: _history_rates(hist, name, config)
                 for name in base}
        out = []
        for _ in range(horizon):
            context = {}
            for f in context_feats:
                if f in config.stationary:
                    context[f] = hist[-1].get(f)
                    continue
                src = f.split("_lag")[0]
                lag = int(f.split("_lag")[1])
                if len(hist) >= lag:
                    v = hist[-lag].get(src)
                    if v is not None:
                        context[f] = v
            rx = react(view, model, context, actions, mode=mode,
                       conviction=conviction, rng=seed_rng)
            new_time = hist[-1][config.time_feature] + dt
            new_case = {config.time_feature: new_time}
            for f in config.stationary:
                new_case[f] = hist[-1].get(f)
            for nm in nominals:
                new_case[nm] = rx.values.get(nm)
            for name in base:
                rate_name, order = top_rates[name]
                top = rx.values.get(rate_name)
                prev_value = hist[-1].get(name)
                if top is None or prev_value is None:
                    new_case[name] = None  # propagate missing values
                    continue
                r1_prev, r2_prev = rates[name]
                if order == 2:
                    r1 = (r1_prev if r1_prev is not None else 0.0) \
                        + top * dt
                else:
                    r1 = top
                new_case[name] = prev_value + r1 * dt
                rates[name] = (r1, top)
            out.append(new_case)
            hist.append(new_case)
        return out

    if mode == "generative" and n_samples > 1:
        rollouts = [one_rollout(np.random.default_rng(rng.integers(2**32)))
                    for _ in range(n_samples)]
        steps = []
        for s in range(horizon):
            agg = {config.time_feature:
                   rollouts[0][s][config.time_feature]}
            band = {}
            for name in base:
                vals = np.array([r[s][name] for r in rollouts
                                 if r[s][name] is not None])
                if len(vals):
                    mean = float(vals.mean())
                    agg[name] = mean
                    band[name] = float(np.abs(vals - mean).mean())
            for nm in nominals:
                votes = [r[s][nm] for r in rollouts if r[s][nm] is not None]
                if votes:
                    agg[nm] = max(sorted(set(map(str, votes))),
                                  key=lambda v: sum(str(x) == v
                                                    for x in votes))
            steps.append({"values": agg, "mad": band})
        return steps
    return [{"values": v, "mad": {}} for v in one_rollout(rng)]


def _history_rates(history, name, config):
    """(rate1, rate2) at the end of the provided history."""
    tf = config.time_feature
    vals = [h.get(name) for h in history]
    times = [h[tf] for h in history]
    r1 = r2 = None
    if len(history) >= 2 and vals[-1] is not None and vals[-2] is not None:
        dt = times[-1] - times[-2]
        if dt:
            r1 = (vals[-1] - vals[-2]) / dt
    if len(history) >= 3 and vals[-2] is not None and vals[-3] is not None:
        dt2 = times[-2] - times[-3]
        dt1 = times[-1] - times[-2]
        if dt1 and dt2:
            r1_prev = (vals[-2] - vals[-3]) / dt2
            if r1 is not None:
                r2 = (r1 - r1_prev) / dt1
    return (r1, r2)
