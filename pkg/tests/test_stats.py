import math

import numpy as np
import pytest
from conftest import make_sample
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hydra_power.errors import MissingColumnError, UndefinedCorrelationError
from hydra_power.stats import (
    FeatureVector,
    NormalizationStats,
    denormalize,
    fit_normalization,
    normalize,
    pearson,
    raw_features,
    rmse,
    select_features,
)
from hydra_power.trace import FEATURE_NAMES, SyntheticConfig, Trace, generate_synthetic

floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=50), rng.normal(size=50)
        assert pearson(x, y) == pytest.approx(naive_pearson(list(x), list(y)), rel=1e-12)

    def test_zero_variance(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])

    @settings(max_examples=200)
    @given(st.lists(st.tuples(floats, floats), min_size=3, max_size=40))
    def test_bounded_and_symmetric(self, pairs):
        x = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
        r = pearson(x, y)
        assert -1.0 <= r <= 1.0
        assert r == pytest.approx(pearson(y, x), abs=1e-12)
        assert pearson(3.0 * x + 7.0, y) == pytest.approx(r, abs=1e-9)


class TestRmse:
    def test_values(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))

    def test_errors(self):
        with pytest.raises(ValueError):
            rmse([1], [1, 2])
        with pytest.raises(ValueError):
            rmse([], [])

    @given(st.lists(floats, min_size=1, max_size=30), floats)
    def test_constant_offset(self, xs, c):
        x = np.array(xs)
        assert rmse(x + c, x) == pytest.approx(abs(c), rel=1e-9, abs=1e-6)


class TestSelectFeatures:
    def test_compute_regime(self):
        tr = generate_synthetic(SyntheticConfig(regime="compute", duration_samples=1000, seed=0))
        rep = select_features(tr, 0.7)
        assert "cpu_util_pct" in rep.selected
        assert "shared_mem_bytes" not in rep.selected
        r = dict(rep.correlations)
        assert r["cpu_util_pct"] >= 0.99

    def test_constant_feature_undefined(self):
        samples = [make_sample(t=float(i), util=10.0 * i, power=100.0 + i) for i in range(5)]
        rep = select_features(Trace("s", 1.0, samples))
        assert "cpu_freq_mhz" in rep.undefined
        assert "cpu_freq_mhz" not in rep.selected
        assert "cpu_util_pct" in rep.selected
        assert "undefined" in rep.to_csv()

    def test_negative_correlation_selected_by_magnitude(self):
        samples = [make_sample(t=float(i), util=50.0, power=100.0 + i, virtual_mem_pct=90.0 - i) for i in range(6)]
        rep = select_features(Trace("s", 1.0, samples))
        assert dict(rep.correlations)["virtual_mem_pct"] == pytest.approx(-1.0)
        assert "virtual_mem_pct" in rep.selected

    def test_requires_power(self):
        tr = Trace("s", 1.0, [make_sample(t=0.0), make_sample(t=1.0)])
        with pytest.raises(MissingColumnError):
            select_features(tr)

    def test_csv_columns(self):
        tr = generate_synthetic(SyntheticConfig(duration_samples=50, seed=0))
        lines = select_features(tr).to_csv().splitlines()
        assert lines[0] == "feature,r,selected"
        assert [ln.split(",")[0] for ln in lines[1:]] == list(FEATURE_NAMES)


class TestNormalization:
    def test_constant_maps_to_half_and_clamps(self):
        mins = np.zeros(11)
        maxs = np.full(11, 10.0)
        maxs[3] = 0.0
        ns = NormalizationStats(mins, maxs)
        x = np.full(11, 5.0)
        x[0] = 20.0
        x[1] = -3.0
        z = ns.transform(x)
        assert z[0] == 1.0 and z[1] == 0.0 and z[3] == 0.5 and z[2] == 0.5
        assert ns.constant[3] and not ns.constant[2]

    def test_rejects_bad_stats(self):
        with pytest.raises(ValueError):
            NormalizationStats(np.ones(11), np.zeros(11))
        with pytest.raises(ValueError):
            NormalizationStats(np.zeros(10), np.ones(10))

    def test_subnormal_span(self):
        ns = NormalizationStats(np.zeros(11), np.full(11, 5e-324))
        z = ns.transform(np.full(11, 5e-324))
        assert np.all(z == 1.0)
        with pytest.raises(ValueError):
            NormalizationStats(np.full(11, -1e308), np.full(11, 1e308))

    def test_doc_roundtrip(self):
        tr = generate_synthetic(SyntheticConfig(duration_samples=80, seed=2))
        ns = fit_normalization([tr])
        assert NormalizationStats.from_doc(ns.to_doc()) == ns

    @settings(max_examples=100)
    @given(arrays(float, (6, 11), elements=st.floats(-1e6, 1e6)))
    def test_transform_in_unit_interval_and_inverse(self, X):
        ns = NormalizationStats(X.min(axis=0), X.max(axis=0))
        Z = ns.transform(X)
        assert Z.min() >= 0.0 and Z.max() <= 1.0
        varying = ~ns.constant
        back = ns.inverse(Z)
        np.testing.assert_allclose(back[:, varying], X[:, varying], rtol=1e-9, atol=1e-6)

    def test_sample_helpers(self):
        tr = generate_synthetic(SyntheticConfig(duration_samples=80, seed=2))
        ns = fit_normalization([tr])
        s = tr.samples[10]
        fv = normalize(s, ns)
        assert fv.normalized
        np.testing.assert_allclose(denormalize(fv, ns), raw_features(s).values, rtol=1e-9)


class TestFeatureVector:
    def test_shape(self):
        with pytest.raises(ValueError):
            FeatureVector(np.zeros(10))

    def test_range_when_normalized(self):
        with pytest.raises(ValueError):
            FeatureVector(np.full(11, 1.5))
        assert not FeatureVector(np.full(11, 1.5), normalized=False).normalized
