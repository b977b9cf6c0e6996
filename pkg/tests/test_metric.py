import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surprisal_engine import CaseStore, FeatureAttribute
from surprisal_engine.metric import (
    DeviationSpec,
    FeatureDeviation,
    NATS_PER_BIT,
    case_probability,
    case_surprisal_matrix,
    cyclic_difference,
    lk_exponential,
    lk_laplace,
    nats_to_bits,
    surprisal_continuous,
    surprisal_of_probability,
)

from _oracles import lk_exponential_quadrature, lk_laplace_quadrature


class TestExpectedDifferenceLaplace:
    def test_zero_difference_is_three_halves_dev(self):
        for r in (0.001, 0.7, 1.0, 42.0):
            assert lk_laplace(0.0, r) == pytest.approx(1.5 * r, abs=1e-12)

    def test_unit_case_closed_form(self):
        assert lk_laplace(1.0, 1.0) == pytest.approx(1.0 + 2.0 / math.e,
                                                     abs=1e-12)

    def test_unit_case_against_quadrature(self):
        assert lk_laplace(1.0, 1.0) == pytest.approx(
            lk_laplace_quadrature(0.0, 1.0, 1.0), abs=1e-6)

    def test_large_difference_approaches_difference(self):
        assert lk_laplace(100.0, 1.0) == pytest.approx(100.0, abs=1e-9)

    def test_lower_bounds(self):
        rng = np.random.default_rng(7)
        d = rng.uniform(0, 20, 500)
        dev = rng.uniform(0.01, 5, 500)
        e = lk_laplace(d, dev)
        assert np.all(e >= d - 1e-12)
        assert np.all(e >= 1.5 * dev * np.exp(-d / dev) - 1e-12)

    def test_nonpositive_deviation_rejected(self):
        with pytest.raises(ValueError):
            lk_laplace(1.0, 0.0)
        with pytest.raises(ValueError):
            lk_laplace(1.0, -1.0)

    def test_random_triples_match_quadrature(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            a, b = rng.uniform(-10, 10, 2)
            dev = rng.uniform(0.01, 10)
            assert lk_laplace(abs(a - b), dev) == pytest.approx(
                lk_laplace_quadrature(a, b, dev), abs=1e-6)


class TestExpectedDifferenceExponential:
    def test_zero_difference_is_dev(self):
        for r in (0.01, 1.0, 9.0):
            assert lk_exponential(0.0, r) == pytest.approx(r, abs=1e-12)

    def test_unit_case(self):
        assert lk_exponential(1.0, 1.0) == pytest.approx(1 + 2 / 3, abs=1e-12)

    def test_unit_case_against_quadrature(self):
        assert lk_exponential(1.0, 1.0) == pytest.approx(
            lk_exponential_quadrature(0.0, 1.0, 1.0), abs=1e-6)

    def test_asymptote(self):
        assert lk_exponential(1e9, 1.0) == pytest.approx(1e9, rel=1e-8)

    def test_nonpositive_deviation_rejected(self):
        with pytest.raises(ValueError):
            lk_exponential(1.0, 0.0)

    def test_random_triples_match_quadrature(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = rng.uniform(-10, 10, 2)
            dev = rng.uniform(0.05, 10)
            assert lk_exponential(abs(a - b), dev) == pytest.approx(
                lk_exponential_quadrature(a, b, dev), abs=1e-6)


class TestMarginalSurprisalContinuous:
    def test_self_surprisal_zero(self):
        assert surprisal_continuous(0.0, 3.7) == 0.0

    def test_unit_case(self):
        assert surprisal_continuous(1.0, 1.0) == pytest.approx(
            1.0 + 2.0 / math.e - 1.5, abs=1e-9)

    def test_asymptote_at_ten_dev(self):
        dev = 0.37
        got = surprisal_continuous(10 * dev, dev)
        assert got == pytest.approx(10 - 1.5, abs=1e-3)

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_difference(self, dev):
        d = np.linspace(0, 50 * dev, 1000)
        s = surprisal_continuous(d, dev)
        assert np.all(np.diff(s) >= -1e-12)
        assert np.all(s >= 0)

    def test_cyclic_difference_wraps(self):
        assert cyclic_difference(350.0, 10.0, 360.0) == pytest.approx(20.0)
        assert cyclic_difference(10.0, 350.0, 360.0) == pytest.approx(20.0)
        assert cyclic_difference(180.0, 0.0, 360.0) == pytest.approx(180.0)


class TestMarginalSurprisalNominal:
    def test_most_probable_class_zero(self):
        dev = FeatureDeviation(kind="nominal", match_prob=0.9,
                               mismatch_prob=0.1, n_classes=2)
        assert dev.nominal_surprisal(0, 0) == 0.0

    def test_mismatch_ln_nine(self):
        dev = FeatureDeviation(kind="nominal", match_prob=0.9,
                               mismatch_prob=0.1, n_classes=2)
        assert dev.nominal_surprisal(0, 1) == pytest.approx(math.log(9.0),
                                                            abs=1e-12)

    def test_indistinguishable_classes_all_zero(self):
        dev = FeatureDeviation(kind="nominal", match_prob=0.25,
                               mismatch_prob=0.25, n_classes=4)
        for cand in range(4):
            assert dev.nominal_surprisal(0, cand) == 0.0

    def test_sparse_override_changes_row(self):
        dev = FeatureDeviation(kind="nominal", match_prob=0.8,
                               mismatch_prob=0.05, n_classes=3,
                               pair_probs={(0, 2): 0.15})
        assert dev.nominal_surprisal(0, 2) == pytest.approx(
            math.log(0.8) - math.log(0.15))
        assert dev.nominal_surprisal(0, 1) == pytest.approx(
            math.log(0.8) - math.log(0.05))


def _two_feature_view(rows):
    store = CaseStore([
        FeatureAttribute("a", "continuous"),
        FeatureAttribute("b", "continuous"),
    ])
    store.train([{"a": x, "b": y} for x, y in rows])
    return store.snapshot()


def _unit_spec():
    return DeviationSpec({
        "a": FeatureDeviation(kind="continuous", scale=1.0),
        "b": FeatureDeviation(kind="continuous", scale=1.0),
    })


class TestCaseSurprisal:
    def test_identical_cases_zero(self):
        view = _two_feature_view([(0.3, -1.2), (5.0, 2.0)])
        t = case_surprisal_matrix(view, {"a": 0.3, "b": -1.2},
                                  ["a", "b"], _unit_spec())
        assert t[0] == 0.0

    def test_additive_over_features(self):
        view = _two_feature_view([(1.0, 1.0)])
        spec = _unit_spec()
        q = {"a": 0.0, "b": 0.0}
        both = case_surprisal_matrix(view, q, ["a", "b"], spec)
        only_a = case_surprisal_matrix(view, q, ["a"], spec)
        only_b = case_surprisal_matrix(view, q, ["b"], spec)
        assert both[0] == pytest.approx(only_a[0] + only_b[0], abs=1e-12)
        s = surprisal_continuous(1.0, 1.0)
        assert both[0] == pytest.approx(2 * s, abs=1e-12)

    def test_influence_weights_scale_terms(self):
        # per-feature surprisals (2, 2) with weights (1, 0.5) -> 3
        from scipy.optimize import brentq
        d = brentq(lambda x: surprisal_continuous(x, 1.0) - 2.0, 0.1, 10.0)
        view = _two_feature_view([(0.0, 0.0)])
        spec = _unit_spec()
        t = case_surprisal_matrix(view, {"a": d, "b": d}, ["a", "b"], spec,
                                  q_weights={"a": 1.0, "b": 0.5})
        assert t[0] == pytest.approx(3.0, abs=1e-9)

    def test_lebesgue_combination(self):
        view = _two_feature_view([(1.0, 2.0)])
        spec = _unit_spec()
        q = {"a": 0.0, "b": 0.0}
        sa = float(case_surprisal_matrix(view, q, ["a"], spec)[0])
        sb = float(case_surprisal_matrix(view, q, ["b"], spec)[0])
        for p in (0.1, 0.5, 2.0):
            got = case_surprisal_matrix(view, q, ["a", "b"], spec, p=p)
            assert got[0] == pytest.approx((sa ** p + sb ** p) ** (1 / p),
                                           rel=1e-12)

    def test_unknown_feature_rejected(self):
        view = _two_feature_view([(0.0, 0.0)])
        with pytest.raises(KeyError):
            case_surprisal_matrix(view, {"zz": 0.0}, ["zz"], _unit_spec())

    def test_null_against_value_uses_null_surprisal(self):
        store = CaseStore([FeatureAttribute("a", "continuous",
                                            allows_null=True)])
        store.train([{"a": 1.0}, {"a": None}])
        view = store.snapshot()
        dev = FeatureDeviation(kind="continuous", scale=1.0, null_prob=0.25)
        spec = DeviationSpec({"a": dev})
        t = case_surprisal_matrix(view, {"a": float("nan")}, ["a"], spec)
        assert t[0] == pytest.approx(-math.log(0.25))  # NULL vs value
        assert t[1] == 0.0  # NULL vs NULL


class TestProbabilityConversions:
    def test_zero_surprisal_probability_one(self):
        assert case_probability(0.0, 1.0) == 1.0

    def test_weight_exponentiates(self):
        assert case_probability(math.log(2.0), 2.0) == pytest.approx(0.25)

    def test_three_nats(self):
        assert case_probability(3.0, 1.0) == pytest.approx(math.exp(-3.0))

    def test_probability_one_zero_surprisal(self):
        assert surprisal_of_probability(1.0) == 0.0

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            surprisal_of_probability(0.0)
        with pytest.raises(ValueError):
            surprisal_of_probability(1.5)

    def test_round_trip_with_case_surprisal(self):
        view = _two_feature_view([(2.0, 3.0)])
        t = case_surprisal_matrix(view, {"a": 2.0, "b": 3.0},
                                  ["a", "b"], _unit_spec())
        assert case_probability(float(t[0]), 1.0) == 1.0

    def test_bit_conversion(self):
        assert nats_to_bits(math.log(2.0)) == pytest.approx(1.0)
        assert NATS_PER_BIT == pytest.approx(math.log(2.0))
