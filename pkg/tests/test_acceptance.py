"""Acceptance suite: one test per criterion, each printing a PASS line.

The heavyweight training fixtures are session-scoped so the privacy-utility
and multimodal-gain criteria share their trained models.
"""

import time

import numpy as np
import pytest

from vflsurv import autodiff as ad
from vflsurv.attack import AttackConfig, run_attack_pipeline
from vflsurv.autodiff import Tape, Tensor
from vflsurv.bayes import PriorSpec, VariationalLinear, kl_gaussian, kl_spike_slab_mc
from vflsurv.data import (CohortSpec, Dataset, ModalityDataSpec,
                          default_cohort_spec, generate_cohort)
from vflsurv.federation import (PrivacySettings, TrainSettings,
                                evaluate_bundle, run_centralized_training,
                                run_vfl_training)
from vflsurv.federation.convergence import ConvergenceToy, verify_convergence_bound
from vflsurv.federation.messages import (DecodeError, decode_message,
                                         encode_message)
from vflsurv.metrics import (concordance, inbll, integrated_brier,
                             risk_from_survival, td_concordance)
from vflsurv.model import aux_loss, combine_loss_taped
from vflsurv.privacy import calibrate_sigma, clip_l2, delta_for
from vflsurv.rng import NoiseRouter
from vflsurv.survival import TimeGrid, build_targets, nll, nll_taped

from oracles import cindex_oracle, ctd_oracle, ibs_oracle, inbll_oracle, random_cohort


def _announce(name, detail=""):
    print(f"\n[acceptance] {name}: PASS {detail}")


def _restrict(ds: Dataset, names) -> Dataset:
    return Dataset(ids=ds.ids, times=ds.times, events=ds.events, split=ds.split,
                   modalities={k: ds.modalities[k] for k in names},
                   present={k: ds.present[k] for k in names},
                   specs={k: ds.specs[k] for k in names})


# ---------------------------------------------------------------------------
# criterion 1: end-to-end gradient suite
# ---------------------------------------------------------------------------

class TestCriterion1GradientSuite:
    def test_end_to_end_gradients_match_finite_differences(self):
        start = time.time()
        mods = (ModalityDataSpec("m0", kind="dense", width=4),
                ModalityDataSpec("m1", kind="dense", width=3))
        ds = generate_cohort(CohortSpec(n_subjects=40, modalities=mods,
                                        latent_dim=4, master_seed=13))
        overrides = dict(embed_dim=5, head_hidden_layers=1, head_hidden_width=6)
        cfg = ds.model_config(4, **overrides)
        from vflsurv.model import build_bundle
        bundle = build_bundle(cfg, master_seed=3)
        rng = np.random.default_rng(0)
        n, p = 8, 4
        xs = {name: ds.modalities[name][:n] for name in bundle.modality_names()}
        grid = TimeGrid(intervals=p, t_max=float(ds.times[:n].max()))
        targets = build_targets(np.minimum(ds.times[:n], grid.t_max),
                                ds.events[:n], grid)
        router = NoiseRouter(99, ("round", 0, 0))

        def loss_value():
            with Tape() as tape:
                embs, kls = [], []
                for name in bundle.modality_names():
                    e = bundle.extractor_forward(name, xs[name], "sample",
                                                 router, True)
                    embs.append(e)
                    kls.append(bundle.client_kl(name))
                hazards, _, _ = bundle.fuse_and_predict(embs, "sample",
                                                        router, True)
                kls.append(bundle.server_kl())
                loss = combine_loss_taped(nll_taped(hazards, targets), kls,
                                          100, aux_loss(embs))
            return tape, loss

        tape, loss = loss_value()
        grads = tape.gradients(loss)
        step = 1e-5
        worst = 0.0
        checked = 0
        for param in bundle.parameters():
            analytic = grads.get(param)
            if analytic is None:
                continue
            flat = param.data.ravel()
            # every mean / batch-norm coordinate; scale parameters sampled
            stride = max(1, flat.size // 4) if param.name.endswith(".rho") else 1
            for i in range(0, flat.size, stride):
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_value()[1].item()
                flat[i] = orig - step
                fm = loss_value()[1].item()
                flat[i] = orig
                fwd = (fp - loss.item()) / step
                bwd = (loss.item() - fm) / step
                if abs(fwd - bwd) > 1e-2 * (abs(fwd) + abs(bwd) + 1.0):
                    continue  # relu kink coordinate
                num = (fp - fm) / (2 * step)
                rel = abs(analytic.ravel()[i] - num) / max(1.0, abs(num))
                worst = max(worst, rel)
                checked += 1
        elapsed = time.time() - start
        assert checked > 200
        assert worst < 1e-4
        assert elapsed < 10.0
        _announce("criterion 1 gradient suite",
                  f"(max rel err {worst:.2e} over {checked} coords, "
                  f"{elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 2: likelihood golden values
# ---------------------------------------------------------------------------

class TestCriterion2LikelihoodGoldens:
    def test_hand_derived_values(self):
        grid = TimeGrid(intervals=3, t_max=3.0)
        h = np.array([[0.1, 0.2, 0.5]])
        event = nll(h, build_targets([1.5], [1], grid))
        censored = nll(h, build_targets([1.5], [0], grid))
        assert abs(event - 1.7148) < 1e-4
        assert abs(censored - 0.3285) < 1e-4
        _announce("criterion 2 likelihood goldens",
                  f"(event {event:.6f}, censored {censored:.6f})")


# ---------------------------------------------------------------------------
# criterion 3: metric oracles
# ---------------------------------------------------------------------------

class TestCriterion3MetricOracles:
    def test_two_hundred_random_cohorts(self):
        start = time.time()
        rng = np.random.default_rng(31337)
        for _ in range(200):
            surv, times, events, grid = random_cohort(rng)
            risks = risk_from_survival(surv)
            assert concordance(risks, times, events) == \
                cindex_oracle(risks, times, events)
            assert td_concordance(surv, times, events, grid) == \
                ctd_oracle(surv, times, events, grid)
            assert abs(integrated_brier(surv, times, events, grid)
                       - ibs_oracle(surv, times, events, grid)) <= 1e-12
            assert abs(inbll(surv, times, events, grid)
                       - inbll_oracle(surv, times, events, grid)) <= 1e-12
        elapsed = time.time() - start
        assert elapsed < 30.0
        _announce("criterion 3 metric oracles",
                  f"(200 cohorts, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 4: KL values
# ---------------------------------------------------------------------------

class TestCriterion4Kl:
    def test_closed_form_and_monte_carlo(self):
        assert abs(kl_gaussian(0, 1, 0, 1) - 0.0) < 1e-6
        assert abs(kl_gaussian(1, 1, 0, 1) - 0.5) < 1e-6
        assert abs(kl_gaussian(0, 0.5, 0, 1) - 0.3181) < 5e-5

        # mixture estimator against the closed form when the prior
        # degenerates to a single Gaussian
        prior = PriorSpec.spike_slab(pi=0.0, sigma_slab=0.3)
        layer = VariationalLinear("L", 2, 2, prior=prior,
                                  init_rng=np.random.default_rng(5))
        layer.w.rho.data[:] = -2.0
        layer.b.rho.data[:] = -2.5
        sig_w = np.logaddexp(0.0, -2.0)
        sig_b = np.logaddexp(0.0, -2.5)
        closed = sum(kl_gaussian(m, sig_w, 0, 0.3)
                     for m in layer.w.mu.data.ravel())
        closed += sum(kl_gaussian(m, sig_b, 0, 0.3)
                      for m in layer.b.mu.data.ravel())
        rng = np.random.default_rng(17)
        chunks = np.array([kl_spike_slab_mc(layer, 1000, rng)
                           for _ in range(100)])  # 1e5 draws total
        se = chunks.std(ddof=1) / np.sqrt(chunks.size)
        assert abs(chunks.mean() - closed) <= 3.0 * se
        _announce("criterion 4 KL",
                  f"(MC {chunks.mean():.4f} vs closed {closed:.4f}, "
                  f"3se {3 * se:.4f})")


# ---------------------------------------------------------------------------
# criterion 5: privacy algebra
# ---------------------------------------------------------------------------

class TestCriterion5PrivacyAlgebra:
    def test_calibration_round_trip_and_clipping(self):
        sigma = calibrate_sigma(1.0, 1e-5, 0.01, 1000, c2=2.0)
        assert abs(sigma - 2.1460) < 1e-4
        delta, _ = delta_for(1.0, sigma, 1000, 0.01)
        assert abs(delta - 1e-5) / 1e-5 < 1e-12

        rng = np.random.default_rng(0)
        v = rng.normal(size=(100_000, 8)) * rng.uniform(0.01, 50,
                                                        size=(100_000, 1))
        norms = np.linalg.norm(clip_l2(v, 1.0), axis=1)
        assert norms.max() <= 1.0
        _announce("criterion 5 privacy algebra",
                  f"(sigma {sigma:.4f}, delta round trip exact, "
                  f"max clipped norm {norms.max():.6f})")
