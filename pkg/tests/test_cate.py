import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline
from scipy.stats import norm

from reworkpolicy import cate as C
from reworkpolicy.errors import ConfigurationError, ShapeError, SingularityError, UnstableQuantileWarning
from reworkpolicy.splines import BasisSpec, bspline_design, build_basis, knot_vector


class TestSplines:
    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 4),
        st.integers(0, 4),
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=20, max_size=200),
    )
    def test_partition_of_unity(self, degree, n_interior, xs):
        x = np.array(xs)
        if np.ptp(x) < 1e-3:
            return
        spec = BasisSpec("bspline_1d", degree, degree + 1 + n_interior, knot_rule="uniform")
        b = build_basis(spec, x)
        np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)
        assert b.min() >= -1e-15

    def test_matches_scipy(self):
        t = knot_vector(-1.0, 2.0, [-0.2, 0.4, 1.1], 3)
        x = np.linspace(-1, 2, 301)
        ref = BSpline.design_matrix(x, t, 3).toarray()
        np.testing.assert_allclose(bspline_design(x, t, 3), ref, atol=1e-14)

    def test_right_endpoint_included(self):
        b = build_basis(BasisSpec("bspline_1d", 3, 5, support=[(0, 1)], interior_knots=[(0.5,)]), [1.0])
        np.testing.assert_allclose(b, [[0, 0, 0, 0, 1]], atol=1e-15)

    def test_dimensions(self):
        x = np.random.default_rng(0).normal(size=(100, 2))
        assert build_basis(BasisSpec("bspline_1d", 3, 5), x[:, 0]).shape == (100, 5)
        assert build_basis(BasisSpec("tensor_bspline_2d", 2, 5), x).shape == (100, 25)
        assert build_basis(BasisSpec("intercept"), x[:, :1]).shape == (100, 1)

    def test_tensor_is_row_kronecker(self):
        x = np.random.default_rng(1).uniform(size=(30, 2))
        spec = BasisSpec("tensor_bspline_2d", 2, 4).resolve(x)
        b = build_basis(spec, x)
        b1 = build_basis(BasisSpec("bspline_1d", 2, 4, support=[spec.support[0]], interior_knots=[spec.interior_knots[0]]), x[:, 0])
        b2 = build_basis(BasisSpec("bspline_1d", 2, 4, support=[spec.support[1]], interior_knots=[spec.interior_knots[1]]), x[:, 1])
        for i in range(30):
            np.testing.assert_allclose(b[i], np.kron(b1[i], b2[i]), atol=1e-15)

    def test_quantile_knots(self):
        x = np.arange(101.0)
        spec = BasisSpec("bspline_1d", 1, 5).resolve(x)
        np.testing.assert_allclose(spec.interior_knots[0], [25.0, 50.0, 75.0])

    def test_clamping_counts(self):
        spec = BasisSpec("bspline_1d", 3, 5, support=[(0, 1)], interior_knots=[(0.5,)])
        b, clamped = build_basis(spec, [-1.0, 0.5, 2.0], return_clamped=True)
        assert clamped == 2
        np.testing.assert_allclose(b[0], build_basis(spec, [0.0])[0])

    def test_invalid_specs(self):
        with pytest.raises(ConfigurationError):
            BasisSpec("bspline_1d", 3, 3)
        with pytest.raises(ConfigurationError):
            BasisSpec("spline")
        with pytest.raises(ShapeError):
            build_basis(BasisSpec("tensor_bspline_2d", 2, 5), np.zeros((4, 1)))

    def test_spec_roundtrip(self):
        spec = BasisSpec("tensor_bspline_2d", 2, 5).resolve(np.random.default_rng(2).normal(size=(50, 2)))
        assert BasisSpec.from_dict(spec.to_dict()) == spec


def linear_scores(n=3000, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    return x, 0.2 + x + noise * rng.normal(size=n)


class TestProjection:
    def test_sandwich_matches_hc0(self):
        x, y = linear_scores(500)
        fit = C.fit_cate(y, x, BasisSpec("bspline_1d", 3, 5))
        b = build_basis(fit.basis, x)
        bread = np.linalg.inv(b.T @ b)
        e = y - b @ bread @ b.T @ y
        hc0 = bread @ (b.T * e**2) @ b @ bread
        np.testing.assert_allclose(fit.omega_hat / fit.n, hc0, rtol=1e-8, atol=1e-14)

    def test_intercept_basis_is_mean(self):
        _, y = linear_scores(400)
        fit = C.project_scores(y, np.ones((400, 1)))
        assert fit.beta_hat[0] == pytest.approx(y.mean())
        se = C.pointwise_se(fit, np.zeros((3, 1)))
        np.testing.assert_allclose(se, y.std() / np.sqrt(400))

    def test_exact_fit_for_cubic_truth(self):
        x = np.linspace(-1, 1, 200)
        y = 1 - x + 2 * x**3
        fit = C.fit_cate(y, x, BasisSpec("bspline_1d", 3, 5))
        grid = np.linspace(-1, 1, 7)
        np.testing.assert_allclose(C.predict_cate(fit, grid), 1 - grid + 2 * grid**3, atol=1e-10)

    def test_singular_basis(self):
        b = np.column_stack([np.ones(10), np.ones(10), np.arange(10.0)])
        with pytest.raises(SingularityError) as err:
            C.project_scores(np.arange(10.0), b)
        # either copy of the duplicated column may be reported
        assert len(err.value.columns) == 1 and err.value.columns[0] in (0, 1)

    def test_ridge_fallback(self):
        b = np.column_stack([np.ones(10), np.ones(10), np.arange(10.0)])
        with pytest.warns(RuntimeWarning):
            fit = C.project_scores(np.arange(10.0), b, ridge_fallback=True)
        assert fit.ridge
        np.testing.assert_allclose(b @ fit.beta_hat, np.arange(10.0), atol=1e-5)

    def test_too_few_rows(self):
        with pytest.raises(ConfigurationError):
            C.project_scores(np.ones(3), np.eye(3))

    def test_roundtrip(self):
        x, y = linear_scores(300)
        fit = C.with_draws(C.fit_cate(y, x, BasisSpec("bspline_1d", 3, 5)), 50, 1)
        back = C.CateFit.from_dict(fit.to_dict(include_draws=True))
        np.testing.assert_array_equal(back.beta_hat, fit.beta_hat)
        np.testing.assert_array_equal(back.bootstrap_draws, fit.bootstrap_draws)
        assert fit.to_dict()["draws_digest"]["shape"] == [50, 5]


class TestBands:
    def setup_method(self):
        x, y = linear_scores(2000, seed=3)
        self.fit = C.fit_cate(y, x, BasisSpec("bspline_1d", 3, 5))
        self.grid = C.default_grid(self.fit, 50)

    def test_draw_covariance(self):
        draws = C.bootstrap_draws(self.fit, 4000, seed=0)
        cov = np.cov(draws.T)
        target = self.fit.omega_hat / self.fit.n
        assert np.abs(cov - target).max() < 0.1 * np.abs(target).max()

    def test_draws_deterministic(self):
        d1 = C.bootstrap_draws(self.fit, 300, seed=5)
        d2 = C.bootstrap_draws(self.fit, 300, seed=5)
        np.testing.assert_array_equal(d1, d2)
        # fewer draws are a prefix of more draws (up to BLAS rounding)
        np.testing.assert_allclose(C.bootstrap_draws(self.fit, 100, seed=5), d1[:100], rtol=1e-12, atol=1e-15)

    def test_uniform_contains_pointwise(self):
        lo_p, hi_p = C.pointwise_band(self.fit, self.grid)
        lo_u, hi_u = C.uniform_band(self.fit, self.grid, n_draws=500)
        assert np.all(lo_u <= lo_p) and np.all(hi_u >= hi_p)

    def test_single_point_critical_value(self):
        cv = C.uniform_critical_value(self.fit, self.grid[:1], 0.05, 4000, 1)
        assert cv == pytest.approx(norm.ppf(0.975), abs=0.08)

    def test_few_draws_warn(self):
        with pytest.warns(UnstableQuantileWarning):
            C.uniform_critical_value(self.fit, self.grid, n_draws=20)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            C.uniform_critical_value(self.fit, self.grid, n_draws=100)

    def test_edges_wider_on_skewed_covariate(self):
        rng = np.random.default_rng(4)
        x = rng.exponential(size=3000)
        fit = C.fit_cate(x + rng.normal(size=3000), x, BasisSpec("bspline_1d", 3, 5))
        se = C.pointwise_se(fit, C.default_grid(fit, 50))
        assert se[-1] == se.max() and se[-1] > 3 * np.median(se)
        # monotone widening over the sparse right tail
        assert np.all(np.diff(se[-15:]) > 0)

    def test_grid_table_columns(self):
        header, rows = C.grid_table(self.fit, self.grid, n_draws=100)
        assert header == ["x_tilde", "theta_hat", "lo_pt", "hi_pt", "lo_unif", "hi_unif"]
        assert rows.shape == (50, 6)
        assert np.all(rows[:, 4] <= rows[:, 2]) and np.all(rows[:, 2] <= rows[:, 1])

    def test_bad_alpha(self):
        with pytest.raises(ConfigurationError):
            C.pointwise_band(self.fit, self.grid, alpha=1.5)
