import numpy as np
import pytest

from vflsurv.federation.convergence import (
    ConvergenceToy, bound_trajectory, run_toy, verify_convergence_bound,
)


def make_toy(noise_std=0.1, epochs=60, n_samples=50):
    # spectrum spans [0.5, 1.0]: alpha = 0.5, beta = 1.0, eta = 1.0
    return ConvergenceToy(eigenvalues=(0.5, 0.7, 0.85, 1.0), clients=3,
                          noise_std=noise_std, epochs=epochs,
                          n_samples=n_samples)


class TestToyMechanics:
    def test_constants_from_spectrum(self):
        toy = make_toy()
        assert toy.alpha == 0.5 and toy.beta == 1.0
        assert toy.full_spectrum().size == 12

    def test_gap0(self):
        toy = make_toy()
        np.testing.assert_allclose(toy.gap0(),
                                   0.5 * 3 * (0.5 + 0.7 + 0.85 + 1.0))

    def test_invalid_spectrum(self):
        with pytest.raises(ValueError):
            ConvergenceToy(eigenvalues=())
        with pytest.raises(ValueError):
            ConvergenceToy(eigenvalues=(0.0, 1.0))

    def test_noiseless_run_is_deterministic(self):
        toy = make_toy(noise_std=0.0)
        np.testing.assert_array_equal(run_toy(toy, 1), run_toy(toy, 2))


class TestBound:
    def test_noiseless_pure_contraction(self):
        toy = make_toy(noise_std=0.0, epochs=80)
        gaps = run_toy(toy, seed=0)
        contraction = (1 - toy.alpha / toy.beta) ** np.arange(1, 81)
        assert np.all(gaps <= contraction * toy.gap0() + 1e-15)

    @pytest.mark.parametrize("sigma", [0.1, 1.0])
    def test_mean_gap_within_bound(self, sigma):
        toy = make_toy(noise_std=sigma)
        report = verify_convergence_bound(toy, seeds=range(50))
        assert report["passed"]
        assert report["max_ratio"] <= 1.05

    def test_long_horizon_plateau_below_floor(self):
        toy = make_toy(noise_std=1.0, epochs=300)
        report = verify_convergence_bound(toy, seeds=range(30))
        floor = report["noise_floor"]
        tail = report["mean_gap"][-50:]
        assert np.all(tail <= floor)
        # and the bound's second term converges to the floor
        np.testing.assert_allclose(report["bound"][-1], floor, rtol=1e-10)

    def test_bound_formula_values(self):
        toy = make_toy(noise_std=0.5, epochs=3, n_samples=20)
        bound = bound_trajectory(toy)
        a_over_b = toy.alpha / toy.beta
        floor = 256 * 0.25 * 3 * 1.0 * toy.beta / (20 * toy.alpha)
        for L in (1, 2, 3):
            expected = ((1 - a_over_b) ** L * toy.gap0()
                        + floor * (1 - (1 - a_over_b) ** L))
            np.testing.assert_allclose(bound[L - 1], expected, rtol=1e-12)

    def test_report_requires_seeds(self):
        with pytest.raises(ValueError):
            verify_convergence_bound(make_toy(), seeds=[])
