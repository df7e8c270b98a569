import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from driftwatch.density import (
    DegenerateDensityError,
    LocalTestResult,
    Region,
    SignificantRegionSet,
    drift_fraction,
    extract_regions,
    find_outliers,
    hochberg_adjust,
    kde_fit,
    local_density_test,
    outlier_report_json,
    select_outliers,
    silverman_bandwidth,
)
from driftwatch.stream import ConfidenceStream


def hochberg_by_decisions(p):
    """Smallest level at which the step-up procedure rejects each hypothesis.

    Hochberg rejects H_(i) at level a iff some j >= i has p_(j) <= a / (n - j + 1),
    so the adjusted value is found by trying every level where a decision flips.
    """
    n = len(p)
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    levels = sorted({min(1.0, (n - j) * sorted_p[j]) for j in range(n)} | {1.0})
    adjusted_sorted = np.ones(n)
    for i in range(n):
        for a in levels:
            if any(sorted_p[j] <= a / (n - j) for j in range(i, n)):
                adjusted_sorted[i] = a
                break
    out = np.empty(n)
    out[order] = adjusted_sorted
    return out


def make_result(deltas, p_adjusted, alpha_star=0.05):
    n = len(deltas)
    return LocalTestResult(grid=np.linspace(0, 1, n), deltas=np.asarray(deltas, float),
                           chi_sq=np.zeros(n), p_raw=np.asarray(p_adjusted, float),
                           p_adjusted=np.asarray(p_adjusted, float), alpha_star=alpha_star)


class TestKde:
    def test_silverman_formula(self):
        x = np.repeat([-1.0, 1.0], 50)
        x = x / x.std(ddof=1)
        assert silverman_bandwidth(x) == pytest.approx(0.9 * 100**-0.2, abs=1e-4)
        assert silverman_bandwidth(x) == pytest.approx(0.3582, abs=1e-4)

    def test_iqr_branch(self, rng):
        x = np.concatenate([np.zeros(40), rng.normal(0, 5, 10)])
        x[:40] += rng.normal(0, 1e-3, 40)
        q75, q25 = np.percentile(x, [75, 25])
        assert silverman_bandwidth(x) == pytest.approx(0.9 * (q75 - q25) / 1.34 * 50**-0.2)

    def test_zero_iqr_falls_back_to_sd(self):
        x = np.array([0.5] * 20 + [0.1, 0.9])
        assert silverman_bandwidth(x) == pytest.approx(0.9 * x.std(ddof=1) * 22**-0.2)

    def test_degenerate(self):
        with pytest.raises(DegenerateDensityError):
            kde_fit([0.3] * 10)
        with pytest.raises(DegenerateDensityError):
            kde_fit([0.1, 0.2, 0.3, 0.4])

    def test_integrates_to_one(self, rng):
        model = kde_fit(rng.beta(8, 2, 300))
        grid = np.linspace(-2, 3, 20001)
        dens = model.density(grid)
        assert np.all(dens >= 0)
        assert integrate.trapezoid(dens, grid) == pytest.approx(1, abs=1e-3)


class TestHochberg:
    def test_matches_decision_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 11))
            p = rng.random(n)
            if rng.random() < 0.3:
                p = np.round(p, 1)  # ties
            np.testing.assert_allclose(hochberg_adjust(p), hochberg_by_decisions(p), atol=1e-12)

    def test_exhaustive_small_grid(self):
        values = [0.001, 0.01, 0.02, 0.04, 0.3, 1.0]
        for n in (1, 2, 3):
            for combo in itertools.product(values, repeat=n):
                p = np.array(combo)
                np.testing.assert_allclose(hochberg_adjust(p), hochberg_by_decisions(p), atol=1e-12)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_bounds(self, p):
        adj = hochberg_adjust(p)
        assert np.all(adj >= np.asarray(p) - 1e-15)
        assert np.all((adj >= 0) & (adj <= 1))

    def test_empty(self):
        assert hochberg_adjust([]).size == 0


class TestLocalTest:
    def test_identical_models(self, rng):
        model = kde_fit(rng.beta(5, 2, 200))
        res = local_density_test(model, model)
        assert np.all(res.deltas == 0)
        assert np.all(res.p_adjusted == 1)

    def test_shapes_and_ranges(self, rng):
        res = local_density_test(kde_fit(rng.beta(8, 2, 300)), kde_fit(rng.beta(2, 2, 80)), n_grid=101)
        assert len(res.grid) == len(res.deltas) == len(res.p_adjusted) == 101
        assert res.grid[0] == 0 and res.grid[-1] == 1
        assert np.all(res.p_adjusted >= res.p_raw)
        for p in (res.p_raw, res.p_adjusted):
            assert np.all((p >= 0) & (p <= 1))

    def test_small_grid_rejected(self, rng):
        model = kde_fit(rng.random(20))
        with pytest.raises(ValueError):
            local_density_test(model, model, n_grid=50)

    def test_variance_floor(self):
        # both densities vanish far from the data: those points are never significant
        m0 = kde_fit(np.linspace(0.0, 0.02, 50))
        m1 = kde_fit(np.linspace(0.0, 0.03, 50))
        res = local_density_test(m0, m1)
        assert np.all(res.p_raw[res.grid > 0.5] == 1)

    def test_null_rarely_significant(self):
        hits = 0
        for rep in range(100):
            r = np.random.default_rng([8, rep])
            res = local_density_test(kde_fit(r.beta(8, 2, 300)), kde_fit(r.beta(8, 2, 300)))
            hits += bool(len(extract_regions(res)))
        assert hits <= 10

    def test_beta_example_left_tail(self):
        r = np.random.default_rng(6)
        res = local_density_test(kde_fit(r.beta(24, 20, 1000)), kde_fit(r.beta(10, 10, 1000)))
        regions = extract_regions(res)
        mode = 23 / 42
        assert any(reg.hi < mode for reg in regions)
        assert all(not reg.contains(mode) for reg in regions)

    def test_monotone_in_alpha_star(self, rng):
        m0, m1 = kde_fit(rng.beta(8, 2, 400)), kde_fit(rng.beta(3, 2, 150))
        strict = local_density_test(m0, m1, alpha_star=0.01).significant_higher
        loose = local_density_test(m0, m1, alpha_star=0.05).significant_higher
        assert np.all(loose[strict])


class TestRegions:
    def test_run_lengths(self):
        res = make_result([1] * 6, [0.5, 0.01, 0.02, 0.5, 0.03, 0.5])
        regions = extract_regions(res).regions
        grid = res.grid
        assert [(r.lo, r.hi) for r in regions] == [(grid[1], grid[2]), (grid[4], grid[4])]
        assert [r.p_value for r in regions] == [0.01, 0.03]
        assert [r.n_points for r in regions] == [2, 1]

    def test_none_significant(self):
        assert len(extract_regions(make_result([1] * 5, [0.5] * 5))) == 0

    def test_one_tailed(self):
        assert len(extract_regions(make_result([-1] * 5, [0.001] * 5))) == 0

    @given(st.lists(st.tuples(st.floats(-2, 2), st.floats(0, 1)), min_size=1, max_size=60))
    def test_region_soundness(self, points):
        deltas, p = zip(*points)
        res = make_result(deltas, p)
        regions = extract_regions(res).regions
        for a, b in zip(regions, regions[1:]):
            assert a.hi < b.lo
        for r in regions:
            inside = (res.grid >= r.lo) & (res.grid <= r.hi)
            assert np.all(res.deltas[inside] > 0)
            assert np.all(res.p_adjusted[inside] < res.alpha_star)

    def test_json(self):
        regions = SignificantRegionSet((Region(0.1, 0.2, 0.01, 5),))
        assert json.loads(regions.to_json()) == [{"lo": 0.1, "hi": 0.2, "p_value": 0.01, "n_points": 5}]


class TestSelectOutliers:
    def test_empty_regions(self):
        assert len(select_outliers(SignificantRegionSet(), [(1, 0.5)])) == 0

    def test_cap_keeps_earliest(self):
        regions = SignificantRegionSet((Region(0.2, 0.4, 0.01, 10),))
        post = [(t, 0.3) for t in range(101, 115)] + [(115, 0.9)]
        assert select_outliers(regions, post, 10).theta_indices == tuple(range(101, 111))

    def test_region_order_by_p_value(self):
        weak = Region(0.1, 0.2, 0.01, 5)
        strong = Region(0.6, 0.7, 0.001, 5)
        post = [(t, 0.15) for t in range(1, 9)] + [(t, 0.65) for t in range(9, 15)]
        sel = select_outliers(SignificantRegionSet((weak, strong)), post, 10)
        assert sel.theta_indices == tuple(range(9, 15)) + (1, 2, 3, 4)

    @given(st.lists(st.floats(0, 1), max_size=40), st.integers(1, 12))
    def test_selection_invariants(self, zs, cap):
        regions = SignificantRegionSet((Region(0.0, 0.25, 0.02, 3), Region(0.5, 0.6, 0.001, 3)))
        post = list(enumerate(zs, start=1))
        sel = select_outliers(regions, post, cap)
        assert len(sel) <= cap
        assert len(set(sel.theta_indices)) == len(sel)
        assert all(regions.contains(zs[t - 1]) for t in sel.theta_indices)


class TestPipeline:
    @pytest.fixture
    def stream(self):
        r = np.random.default_rng(21)
        z = np.concatenate([r.beta(8, 2, 400), r.beta(2, 2, 100)])
        return ConfidenceStream.from_values(z, np.arange(500) >= 400, changepoint=400)

    def test_find_outliers(self, stream):
        report = find_outliers(stream.values, 400, 500)
        sel = report.selection
        assert 1 <= len(sel) <= 10
        assert all(401 <= t <= 500 for t in sel.theta_indices)
        assert all(report.regions.contains(stream.values[t - 1]) for t in sel.theta_indices)
        assert drift_fraction(sel.theta_indices, stream) == 1.0

    def test_report_json_hides_ground_truth(self, stream):
        sel = find_outliers(stream.values, 400, 500).selection
        rows = json.loads(outlier_report_json(sel, stream))
        assert all(set(row) == {"t", "z", "label"} for row in rows)

    def test_drift_fraction(self):
        stream = ConfidenceStream.from_values([0.5] * 4, [True, True, True, False])
        assert drift_fraction([1, 2, 3, 4], stream) == 0.75
        assert drift_fraction([1, 2], stream) == 1.0
        with pytest.raises(ValueError):
            drift_fraction([], stream)
