import numpy as np
import pytest

from vflsurv import autodiff as ad
from vflsurv.autodiff import Tensor
from vflsurv.survival import (
    TimeGrid, build_targets, discretize, hazards_to_survival, nll, nll_taped,
)


GRID300 = TimeGrid(intervals=30, t_max=300.0)


class TestDiscretize:
    def test_interior_point(self):
        # cut points 10, 20, 30, ...; 25 lies in (20, 30]
        assert discretize(25.0, GRID300) == 2

    def test_zero_maps_to_first_interval(self):
        assert discretize(0.0, GRID300) == 0

    def test_upper_boundary(self):
        assert discretize(300.0, GRID300) == 29

    def test_cut_point_belongs_to_left_interval(self):
        assert discretize(10.0, GRID300) == 0
        assert discretize(20.0, GRID300) == 1

    def test_beyond_tmax_clamps(self):
        assert discretize(999.0, GRID300) == 29

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            discretize(-1.0, GRID300)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(intervals=0, t_max=10.0)
        with pytest.raises(ValueError):
            TimeGrid(intervals=3, t_max=0.0)

    def test_cut_points_strictly_increasing(self):
        cuts = TimeGrid(intervals=7, t_max=13.0).cut_points
        assert np.all(np.diff(cuts) > 0)
        assert cuts[-1] == 13.0


class TestBuildTargets:
    GRID4 = TimeGrid(intervals=4, t_max=4.0)

    def test_event_mid_grid(self):
        t = build_targets([2.5], [1], self.GRID4)
        np.testing.assert_array_equal(t.exposure, [[1, 1, 1, 0]])
        np.testing.assert_array_equal(t.event, [[0, 0, 1, 0]])

    def test_censored(self):
        t = build_targets([1.5], [0], self.GRID4)
        np.testing.assert_array_equal(t.exposure, [[1, 1, 0, 0]])
        np.testing.assert_array_equal(t.event, [[0, 0, 0, 0]])

    def test_event_last_interval(self):
        t = build_targets([4.0], [1], self.GRID4)
        np.testing.assert_array_equal(t.exposure, [[1, 1, 1, 1]])
        np.testing.assert_array_equal(t.event, [[0, 0, 0, 1]])

    def test_at_most_one_event_per_row(self):
        rng = np.random.default_rng(0)
        times = rng.uniform(0, 4, size=50)
        events = rng.integers(0, 2, size=50)
        t = build_targets(times, events, self.GRID4)
        assert set(np.unique(t.event.sum(axis=1))) <= {0.0, 1.0}


class TestSurvivalCurves:
    def test_hand_row(self):
        s = hazards_to_survival(np.array([[0.1, 0.2, 0.5]]))
        np.testing.assert_allclose(s, [[0.9, 0.72, 0.36]])

    def test_halving(self):
        s = hazards_to_survival(np.full((1, 3), 0.5))
        np.testing.assert_allclose(s, [[0.5, 0.25, 0.125]])

    def test_no_risk_limit(self):
        s = hazards_to_survival(np.full((2, 4), 1e-12))
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_rows_strictly_decreasing_for_positive_hazards(self):
        rng = np.random.default_rng(5)
        h = rng.uniform(0.01, 0.99, size=(20, 8))
        s = hazards_to_survival(h)
        assert np.all(np.diff(s, axis=1) < 0)


class TestNll:
    H = np.array([[0.1, 0.2, 0.5]])
    GRID3 = TimeGrid(intervals=3, t_max=3.0)

    def test_event_golden_value(self):
        targets = build_targets([1.5], [1], self.GRID3)
        np.testing.assert_allclose(nll(self.H, targets),
                                   -(np.log(0.9) + np.log(0.2)), rtol=1e-12)
        np.testing.assert_allclose(nll(self.H, targets), 1.7148, atol=1e-4)

    def test_censored_golden_value(self):
        targets = build_targets([1.5], [0], self.GRID3)
        np.testing.assert_allclose(nll(self.H, targets),
                                   -(np.log(0.9) + np.log(0.8)), rtol=1e-12)
        np.testing.assert_allclose(nll(self.H, targets), 0.3285, atol=1e-4)

    def test_perfect_prediction_limit(self):
        targets = build_targets([1.5], [1], self.GRID3)
        h = np.array([[1e-9, 1.0 - 1e-9, 0.5]])
        assert nll(h, targets) < 1e-6

    def test_invariant_outside_exposure(self):
        targets = build_targets([1.5], [1], self.GRID3)
        base = nll(self.H, targets)
        h2 = self.H.copy()
        h2[0, 2] = 0.999  # masked-out interval
        assert nll(h2, targets) == base

    def test_mean_reduction_is_batch_size_free(self):
        targets1 = build_targets([1.5], [1], self.GRID3)
        targets3 = build_targets([1.5] * 3, [1] * 3, self.GRID3)
        h3 = np.repeat(self.H, 3, axis=0)
        np.testing.assert_allclose(nll(self.H, targets1), nll(h3, targets3))

    def test_exp_of_loglik_reproduces_product_likelihood(self):
        # two-interval hand case: exp(log-lik) equals the product form
        grid = TimeGrid(intervals=2, t_max=2.0)
        h = np.array([[0.3, 0.6]])
        event_t = build_targets([1.5], [1], grid)
        lik = np.exp(-nll(h, event_t))
        np.testing.assert_allclose(lik, 0.6 * (1 - 0.3), rtol=1e-12)
        cens_t = build_targets([1.5], [0], grid)
        lik_c = np.exp(-nll(h, cens_t))
        np.testing.assert_allclose(lik_c, (1 - 0.3) * (1 - 0.6), rtol=1e-12)

    def test_taped_matches_plain_and_gradient(self):
        rng = np.random.default_rng(11)
        h0 = rng.uniform(0.05, 0.95, size=(6, 4))
        grid = TimeGrid(intervals=4, t_max=4.0)
        targets = build_targets(rng.uniform(0, 4, size=6),
                                rng.integers(0, 2, size=6), grid)
        taped = nll_taped(Tensor(h0), targets)
        np.testing.assert_allclose(taped.item(), nll(h0, targets), rtol=1e-12)
        err = ad.check_gradient(lambda h: nll_taped(h, targets),
                                Tensor(h0), step=1e-7)
        assert err < 1e-6

    def test_shape_mismatch(self):
        targets = build_targets([1.5], [1], self.GRID3)
        with pytest.raises(ValueError):
            nll(np.ones((1, 4)) * 0.5, targets)
