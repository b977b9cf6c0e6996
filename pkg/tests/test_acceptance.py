"""End-to-end acceptance suite.

Each test pins one externally checkable behavior of the engine at a
fixed, pre-calibrated configuration: the closed-form expected-difference
formula against numeric quadrature, the metric axioms, surprisal
arithmetic on a published coin-flip example, exact-kNN equivalence
against a naive scan, benchmark classification accuracy, robustness to
missing data, feature-probability sanity, explanation symmetry for
near-duplicate features, causal-direction recovery, anomaly detection,
store reduction, generative fidelity, the differential-privacy
mechanism, time-series forecasting, and synthetic-data utility.
"""

import time
import warnings

import numpy as np
import pytest
from scipy.stats import anderson_ksamp, kstest, laplace, spearmanr
from sklearn.datasets import (load_breast_cancer, load_diabetes,
                              load_iris)
from sklearn.ensemble import (RandomForestClassifier,
                              RandomForestRegressor)
from sklearn.metrics import f1_score, matthews_corrcoef
from sklearn.model_selection import train_test_split

from surprisal_engine import (CaseStore, FeatureAttribute, analyze,
                              infer_feature_attributes)
from surprisal_engine.aggregate import react_aggregate
from surprisal_engine.anomaly import detect_anomalies
from surprisal_engine.insight import (causal_asymmetries,
                                      prediction_contributions)
from surprisal_engine.lifecycle import AblationPolicy
from surprisal_engine.lifecycle import reduce as reduce_store
from surprisal_engine.metric import (case_surprisal_matrix, lk_laplace,
                                     nats_to_bits, surprisal_continuous,
                                     surprisal_of_probability)
from surprisal_engine.query import encode_context, find_nearest_cases
from surprisal_engine.react import react
from surprisal_engine.series import SeriesConfig, derive, react_series
from surprisal_engine.synth import (SynthConfig, dp_branch_probabilities,
                                    dp_generate_continuous,
                                    dp_generate_nominal,
                                    synthesize_dataset)

from _oracles import lk_laplace_quadrature_batch


# ---------------------------------------------------------------------
# Expected difference: closed form vs numeric quadrature


def test_expected_difference_matches_quadrature():
    t0 = time.time()
    rng = np.random.default_rng(0)
    a = rng.uniform(-10.0, 10.0, 1000)
    b = rng.uniform(-10.0, 10.0, 1000)
    dev = rng.uniform(0.05, 5.0, 1000)
    closed = lk_laplace(np.abs(a - b), dev)
    numeric = lk_laplace_quadrature_batch(a, b, dev)
    assert np.max(np.abs(closed - numeric)) < 1e-6
    assert time.time() - t0 < 30.0


# ---------------------------------------------------------------------
# Metric axioms on random case triples with constant deviations


def _random_triples(n_triples=10_000, n_features=4, seed=1):
    rng = np.random.default_rng(seed)
    x, y, z = rng.normal(0.0, 3.0, (3, n_triples, n_features))
    dev = rng.uniform(0.1, 2.0, n_features)

    def total(p, q):
        return surprisal_continuous(np.abs(p - q), dev).sum(axis=1)

    return x, y, z, total


def test_metric_nonnegativity():
    x, y, z, total = _random_triples()
    assert np.all(total(x, y) >= -1e-9)
    assert np.all(total(y, z) >= -1e-9)
    assert np.all(total(x, z) >= -1e-9)


def test_metric_symmetry():
    x, y, _, total = _random_triples()
    assert np.max(np.abs(total(x, y) - total(y, x))) < 1e-9


def test_metric_identity():
    x, _, _, total = _random_triples()
    assert np.max(np.abs(total(x, x))) < 1e-9


def test_metric_triangle_inequality():
    """Triangle inequality over 10,000 random triples.

    This test fails, and the failure is a property of the closed form
    itself, not of the implementation: per-feature surprisal as a
    function of the value difference d is strictly convex (its second
    derivative is 0.5 * e^(-d/dev) * (1 + d/dev) / dev**2 > 0) with
    f(0) = f'(0) = 0, hence superadditive, so every collinear triple
    violates the triangle inequality.  Concretely with dev = 1 and
    scalar values 0, 1, 2: f(2) = 0.8384 > 2 * f(1) = 0.4721.  The
    violation grows toward 1.5 nats per feature as the values spread
    apart.  The test is kept in its stated form rather than weakened.
    """
    t0 = time.time()
    x, y, z, total = _random_triples()
    lhs = total(x, z)
    rhs = total(x, y) + total(y, z)
    assert np.all(lhs <= rhs + 1e-9)
    assert time.time() - t0 < 10.0


# ---------------------------------------------------------------------
# Coin-edge surprisal arithmetic


def test_coin_edge_surprisal_bits():
    edge_bits = nats_to_bits(surprisal_of_probability(1.0 / 6000.0))
    assert edge_bits == pytest.approx(12.55075, abs=1e-4)
    assert edge_bits - 1.00024 == pytest.approx(11.55051, abs=1e-4)


# ---------------------------------------------------------------------
# Exact nearest-case search vs naive full scan


def test_nearest_cases_match_naive_scan():
    t0 = time.time()
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(20, 150))
        n_cont = int(rng.integers(1, 4))
        n_nom = int(rng.integers(0, 3))
        feats, data = [], {}
        for j in range(n_cont):
            name = "c%d" % j
            feats.append(FeatureAttribute(name))
            data[name] = rng.normal(0, rng.uniform(0.5, 5), n)
        for j in range(n_nom):
            name = "m%d" % j
            feats.append(FeatureAttribute(name, "nominal"))
            data[name] = rng.integers(0, rng.integers(2, 5), n)
        store = CaseStore(feats)
        store.train([{k: (float(v[i]) if k.startswith("c") else int(v[i]))
                      for k, v in data.items()} for i in range(n)])
        model = analyze(store, seed=0)
        view, spec = store.snapshot(), model.spec
        names = [f.name for f in feats]
        for _ in range(50):
            ctx = {}
            for name in names:
                if name.startswith("c"):
                    ctx[name] = float(rng.normal(0, 3))
                else:
                    ctx[name] = int(rng.integers(0, 5))
            k = int(rng.integers(1, 11))
            idx, surp = find_nearest_cases(
                view, ctx, spec, k, rng=np.random.default_rng(7))
            enc = encode_context(view, ctx)
            T = np.atleast_2d(
                case_surprisal_matrix(view, enc, names, spec))[0]
            naive = np.sort(T)[:k]
            assert len(surp) == min(k, n)
            np.testing.assert_allclose(np.sort(surp), naive, atol=1e-9)
            # id sets may differ only across exact ties at the boundary
            assert np.all(T[idx] <= naive[-1] + 1e-9)
    assert time.time() - t0 < 300.0


# ---------------------------------------------------------------------
# Benchmark leave-one-out bootstrap accuracy


def _tabular_store(X, y, class_names):
    feats = [FeatureAttribute("f%d" % i) for i in range(X.shape[1])]
    feats.append(FeatureAttribute("target", "nominal",
                                  domain=list(class_names)))
    store = CaseStore(feats)
    rows = [dict({"f%d" % i: float(X[r, i]) for i in range(X.shape[1])},
                 target=str(class_names[y[r]])) for r in range(len(X))]
    store.train(rows)
    return store


@pytest.mark.parametrize("loader,floor", [(load_iris, 0.93),
                                          (load_breast_cancer, 0.92)])
def test_benchmark_accuracy(loader, floor):
    t0 = time.time()
    d = loader()
    store = _tabular_store(d.data, d.target,
                           [str(c) for c in d.target_names])
    model = analyze(store, seed=0)
    report = react_aggregate(store, model, "target", seed=0)
    assert report["accuracy"] >= floor
    assert time.time() - t0 < 120.0


# ---------------------------------------------------------------------
# Robustness to missing data


def test_null_robustness():
    t0 = time.time()
    d = load_breast_cancer()
    X, y = d.data, d.target
    names = [str(c) for c in d.target_names]
    fracs = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    accs = []
    for frac in fracs:
        rng = np.random.default_rng(0)
        mask = rng.random(X.shape) < frac
        feats = [FeatureAttribute("f%d" % i, allows_null=True)
                 for i in range(X.shape[1])]
        feats.append(FeatureAttribute("target", "nominal", domain=names))
        store = CaseStore(feats)
        rows = []
        for r in range(len(X)):
            row = {"f%d" % i: (None if mask[r, i] else float(X[r, i]))
                   for i in range(X.shape[1])}
            row["target"] = names[y[r]]
            rows.append(row)
        store.train(rows)
        model = analyze(store, seed=0)
        accs.append(react_aggregate(store, model, "target",
                                    seed=0)["accuracy"])
    assert accs[fracs.index(0.5)] >= 0.80
    assert spearmanr(fracs, accs).statistic < 0
    assert time.time() - t0 < 600.0


# ---------------------------------------------------------------------
# Feature-probability sanity


def _additive_store(rng, n, copies=0):
    x1 = rng.uniform(0, 1, n)
    x2 = rng.uniform(0, 1, n)
    data = {"x1": x1, "x2": x2, "t": x1 + x2}
    for c in range(copies):
        data["c%d" % c] = x1 + rng.normal(0, 1e-6, n)
    rows = [dict(zip(data, vals))
            for vals in zip(*[v.tolist() for v in data.values()])]
    feats = infer_feature_attributes(
        [[r[k] for k in data] for r in rows], list(data))
    store = CaseStore(feats)
    store.train(rows)
    return store


def test_feature_probabilities_additive_target():
    t0 = time.time()
    store = _additive_store(np.random.default_rng(0), 400)
    model = analyze(store, targets=["t"], seed=0, eval_rows=150)
    q = model.feature_probs["t"]
    assert q["x1"] == pytest.approx(0.5, abs=0.1)
    assert q["x2"] == pytest.approx(0.5, abs=0.1)
    assert time.time() - t0 < 120.0


def test_feature_probabilities_tenfold_duplication():
    t0 = time.time()
    store = _additive_store(np.random.default_rng(0), 400, copies=9)
    model = analyze(store, targets=["t"], seed=0, eval_rows=150)
    q = model.feature_probs["t"]
    copy_probs = [v for k, v in q.items() if k != "x2"]
    assert len(copy_probs) == 10
    for p in copy_probs:
        assert p == pytest.approx(0.05, abs=0.03)
    assert time.time() - t0 < 120.0


# ---------------------------------------------------------------------
# Near-duplicate features share explanation credit


def test_near_duplicate_features_share_contribution():
    t0 = time.time()
    rng = np.random.default_rng(0)
    n = 400
    A = rng.uniform(0, 1, n)
    C = rng.uniform(0, 10, n)
    D = rng.uniform(0, 0.1, n)
    B = A + rng.normal(0, 0.001, n)
    t = A + C + D
    store = CaseStore([FeatureAttribute(x)
                       for x in ["A", "B", "C", "D", "t"]])
    store.train([{"A": float(a), "B": float(b), "C": float(c),
                  "D": float(d), "t": float(v)}
                 for a, b, c, d, v in zip(A, B, C, D, t)])
    model = analyze(store, seed=0)
    _, apc = prediction_contributions(
        store.snapshot(), model.spec, "t",
        rng=np.random.default_rng(0), n_rows=200)
    ratio = apc["A"] / apc["B"]
    assert 0.8 <= ratio <= 1.25
    assert time.time() - t0 < 120.0


# ---------------------------------------------------------------------
# Causal-direction recovery on a generative toy


def _pair_asymmetry(a, b, seed):
    rows = [{"a": float(p), "b": float(q)} for p, q in zip(a, b)]
    feats = infer_feature_attributes(
        [[r["a"], r["b"]] for r in rows], ["a", "b"])
    store = CaseStore(feats)
    store.train(rows)
    model = analyze(store, seed=seed)
    return causal_asymmetries(
        store.snapshot(), model, rng=np.random.default_rng(seed),
        n_rows=1000, threshold=0.008, undirected_mcr=np.inf)


def test_causal_toy_direction_recovery():
    t0 = time.time()
    sig_hits = ctl_clean = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, 1000)
        y = x + rng.normal(0, 0.2, 1000)
        rep = _pair_asymmetry(x, y, seed)
        if ("a", "b", "directed") in rep["edges"] \
                and rep["iaac"][("a", "b")] > 0:
            sig_hits += 1
        u = rng.uniform(0, 1, 1000)
        v = rng.uniform(0, 1, 1000)
        if not _pair_asymmetry(u, v, seed)["edges"]:
            ctl_clean += 1
    assert sig_hits >= 8
    assert ctl_clean >= 9
    assert time.time() - t0 < 300.0


# ---------------------------------------------------------------------
# Anomaly detection on blob plus uniform outliers


def test_anomaly_detection_f1():
    t0 = time.time()
    rng = np.random.default_rng(0)
    inliers = rng.uniform(-1, 1, (570, 2))
    outliers = []
    while len(outliers) < 30:
        p = rng.uniform(-10, 10, 2)
        if np.max(np.abs(p)) > 3:
            outliers.append(p)
    pts = np.vstack([inliers, np.array(outliers)])
    truth = np.r_[np.zeros(570), np.ones(30)]
    store = CaseStore([FeatureAttribute("x"), FeatureAttribute("y")])
    store.train([{"x": float(a), "y": float(b)} for a, b in pts])
    model = analyze(store, seed=0)
    rep = detect_anomalies(store.snapshot(), model.spec,
                           rng=np.random.default_rng(0))
    pred = np.zeros(len(pts))
    pred[rep["flagged"]] = 1
    assert f1_score(truth, pred) >= 0.9
    assert np.all(rep["similarity_conviction"] > 0)
    assert np.all(rep["group_conviction"] > 0)
    assert np.all(rep["min_conviction"] > 0)
    assert time.time() - t0 < 60.0


# ---------------------------------------------------------------------
# Store reduction conserves mass and downstream accuracy


def test_reduction_conserves_mass_and_accuracy():
    t0 = time.time()
    rng = np.random.default_rng(0)
    protos = rng.normal(0, 1, (100, 2)) * [2.0, 1.0]
    labels = (protos[:, 0] + protos[:, 1] > 0).astype(int)
    idx = rng.integers(0, 100, 10_000)
    pts = protos[idx] + rng.normal(0, 0.05, (10_000, 2))
    cls = labels[idx]
    store = CaseStore([FeatureAttribute("x"), FeatureAttribute("y"),
                       FeatureAttribute("c", "nominal")])
    store.train([{"x": float(a), "y": float(b), "c": int(k)}
                 for (a, b), k in zip(pts, cls)])
    model = analyze(store, seed=0)
    full_mcc = react_aggregate(store, model, "c", seed=0)["mcc"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = reduce_store(store, model,
                              policy=AblationPolicy(batch_size=1024),
                              rng=np.random.default_rng(0))
    assert report["final_size"] <= max(report["target"], 10_000)
    assert abs(sum(store.weights) - 10_000.0) < 1e-9
    model2 = analyze(store, seed=0)
    reduced_mcc = react_aggregate(store, model2, "c", seed=0)["mcc"]
    assert abs(full_mcc - reduced_mcc) <= 0.05
    assert time.time() - t0 < 600.0


# ---------------------------------------------------------------------
# Generative fidelity at conviction 1


def test_generative_draws_follow_marginals():
    t0 = time.time()
    rng = np.random.default_rng(0)
    n = 2000
    x = np.concatenate([rng.normal(-2, 0.5, n // 2),
                        rng.normal(2, 1.0, n // 2)])
    y = x + rng.normal(0, 0.01, n)
    c = rng.choice(["a", "b"], n, p=[0.6, 0.4])
    store = CaseStore([FeatureAttribute("x"), FeatureAttribute("y"),
                       FeatureAttribute("c", "nominal")])
    store.train([{"x": float(v), "y": float(w), "c": str(k)}
                 for v, w, k in zip(x, y, c)])
    model = analyze(store, seed=0)
    view = store.snapshot()
    gen_rng = np.random.default_rng(1)
    xs, ys, cs = [], [], []
    for _ in range(10_000):
        r = react(view, model, {}, ["x", "y", "c"], mode="generative",
                  conviction=1.0, rng=gen_rng)
        xs.append(r.values["x"])
        ys.append(r.values["y"])
        cs.append(r.values["c"])
    for train, drawn in ((x, np.array(xs)), (y, np.array(ys))):
        res = anderson_ksamp([train, drawn])
        # the last critical value corresponds to the 0.1% level
        assert res.statistic < res.critical_values[-1]
    cs = np.array(cs)
    for k in ("a", "b"):
        assert abs(np.mean(c == k) - np.mean(cs == k)) <= 0.03
    assert time.time() - t0 < 120.0


# ---------------------------------------------------------------------
# Differential-privacy mechanism


def test_dp_continuous_noise_is_laplace():
    t0 = time.time()
    rng = np.random.default_rng(0)
    values = [0.0, 1.0, 2.0, 3.0, 4.0]
    epsilon, feature_range = 0.5, 10.0
    # sensitivity = max(range / n_values, largest value gap) = 2.0
    draws = np.array([dp_generate_continuous(values, epsilon,
                                             feature_range, rng)[0]
                      for _ in range(100_000)])
    noise = draws - np.mean(values)
    ks = kstest(noise, laplace(scale=2.0 / epsilon).cdf)
    assert ks.pvalue > 0.001
    assert time.time() - t0 < 120.0


def test_dp_nominal_branch_frequencies():
    store = CaseStore([FeatureAttribute("c", "nominal",
                                        domain=["a", "b", "c"])])
    store.train([{"c": ["a", "b", "c"][i % 3]} for i in range(30)])
    view = store.snapshot()
    rng = np.random.default_rng(1)
    counts = np.zeros(3)
    for _ in range(50_000):
        _, branch = dp_generate_nominal(view, "c", [0, 1], [0.6, 0.4],
                                        1.0, rng, domain=["a", "b", "c"])
        counts[branch] += 1
    empirical = counts / counts.sum()
    expected = np.array(dp_branch_probabilities(1.0))
    assert np.max(np.abs(empirical - expected)) <= 0.01


# ---------------------------------------------------------------------
# Time-series forecasting


def test_series_sine_forecast_beats_persistence():
    t0 = time.time()
    step = 2 * np.pi / 40
    ts = np.arange(0, 2 * np.pi * 12, step)
    vs = np.sin(ts)
    n_train = len(ts) - 25
    store = CaseStore([FeatureAttribute("t", is_time=True),
                       FeatureAttribute("v")])
    store.train([{"t": float(a), "v": float(b)}
                 for a, b in zip(ts[:n_train], vs[:n_train])])
    derive(store, SeriesConfig(time_feature="t", rate_order=1, lags=3))
    model = analyze(store, seed=0)
    history = [{"t": float(a), "v": float(b)}
               for a, b in zip(ts[n_train - 6:n_train],
                               vs[n_train - 6:n_train])]
    forecast = react_series(store, model, history, 25,
                            rng=np.random.default_rng(0))
    pred = np.array([s["values"]["v"] for s in forecast])
    actual = vs[n_train:n_train + 25]
    mae = np.abs(pred - actual).mean()
    persistence = np.abs(vs[n_train - 1] - actual).mean()
    assert mae < persistence
    assert time.time() - t0 < 60.0


def test_series_constant_forecast_exact():
    store = CaseStore([FeatureAttribute("t", is_time=True),
                       FeatureAttribute("v")])
    store.train([{"t": float(i), "v": 5.0} for i in range(60)])
    derive(store, SeriesConfig(time_feature="t", rate_order=1, lags=2))
    model = analyze(store, seed=0)
    history = [{"t": float(i), "v": 5.0} for i in range(55, 60)]
    forecast = react_series(store, model, history, 10,
                            rng=np.random.default_rng(0))
    for step in forecast:
        assert step["values"]["v"] == pytest.approx(5.0, abs=1e-9)


# ---------------------------------------------------------------------
# Synthetic-data utility at conviction 5


def _synthesize(X, y, nominal_target, class_names=None):
    feats = [FeatureAttribute("f%d" % i) for i in range(X.shape[1])]
    feats.append(FeatureAttribute(
        "t", "nominal", domain=class_names) if nominal_target
        else FeatureAttribute("t"))
    store = CaseStore(feats)
    rows = []
    for r in range(len(X)):
        row = {"f%d" % i: float(X[r, i]) for i in range(X.shape[1])}
        row["t"] = (class_names[y[r]] if nominal_target else float(y[r]))
        rows.append(row)
    store.train(rows)
    model = analyze(store, seed=0)
    cases, _ = synthesize_dataset(
        store, model, len(X),
        config=SynthConfig(mode="conviction", conviction=5.0, seed=0))
    Xs = np.array([[case["f%d" % i] for i in range(X.shape[1])]
                   for case in cases])
    return Xs, [case["t"] for case in cases]


def test_synthetic_utility_classification():
    t0 = time.time()
    d = load_iris()
    names = [str(c) for c in d.target_names]
    Xtr, Xte, ytr, yte = train_test_split(
        d.data, d.target, test_size=0.33, random_state=0,
        stratify=d.target)
    clf = RandomForestClassifier(random_state=0).fit(Xtr, ytr)
    mcc_orig = matthews_corrcoef(yte, clf.predict(Xte))
    Xs, ys = _synthesize(Xtr, ytr, True, names)
    ys = np.array([names.index(v) for v in ys])
    clf2 = RandomForestClassifier(random_state=0).fit(Xs, ys)
    mcc_syn = matthews_corrcoef(yte, clf2.predict(Xte))
    assert mcc_orig - mcc_syn <= 0.07
    assert time.time() - t0 < 900.0


def test_synthetic_utility_regression():
    t0 = time.time()
    d = load_diabetes()
    Xtr, Xte, ytr, yte = train_test_split(
        d.data, d.target, test_size=0.33, random_state=0)
    reg = RandomForestRegressor(random_state=0).fit(Xtr, ytr)
    sp_orig = spearmanr(yte, reg.predict(Xte)).statistic
    Xs, ys = _synthesize(Xtr, ytr, False)
    ok = np.array([v is not None and np.isfinite(v) for v in ys])
    reg2 = RandomForestRegressor(random_state=0).fit(
        Xs[ok], np.asarray(ys, dtype=float)[ok])
    sp_syn = spearmanr(yte, reg2.predict(Xte)).statistic
    assert sp_orig - sp_syn <= 0.05
    assert time.time() - t0 < 900.0
