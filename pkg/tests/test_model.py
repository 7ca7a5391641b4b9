import numpy as np
import pytest

from vflsurv import autodiff as ad
from vflsurv.autodiff import Tensor
from vflsurv.model import (
    AttentionFusion, ModalityModelSpec, ModelConfig, ModelBundle,
    aux_loss, build_bundle, combine_loss_taped, load_checkpoint,
    predict_hazards, save_checkpoint, select_hidden_width, total_loss,
    CheckpointError,
)
from vflsurv.rng import NoiseRouter
from vflsurv.survival import TimeGrid, build_targets, nll_taped


def tiny_config(n_mod=2, clinical=False):
    mods = []
    if clinical:
        mods.append(ModalityModelSpec("clin", kind="clinical",
                                      vocab_sizes=(3, 4), continuous=1))
    while len(mods) < n_mod:
        k = len(mods)
        mods.append(ModalityModelSpec(f"m{k}", kind="dense", width=4 + k,
                                      hidden_layers=1, hidden_width=8))
    return ModelConfig(modalities=tuple(mods), intervals=4, embed_dim=6,
                       cat_embed_dim=3, clinical_hidden=7,
                       head_hidden_layers=1, head_hidden_width=8, dropout=0.5)


class TestHiddenWidthRule:
    def test_small_input(self):
        assert select_hidden_width(100, 1) == 128

    def test_near_top_candidate(self):
        assert select_hidden_width(1000, 1) == 1024

    def test_fallback_with_scale(self):
        assert select_hidden_width(1881, 2) == 2048
        assert select_hidden_width(3774, 2) == 2048

    def test_exact_candidate(self):
        assert select_hidden_width(512, 1) == 512

    def test_invalid(self):
        with pytest.raises(ValueError):
            select_hidden_width(0, 1)


class TestClinicalNet:
    def test_output_width_is_embed_dim(self):
        cfg = tiny_config(1, clinical=True)
        bundle = build_bundle(cfg, master_seed=1)
        x = np.array([[0, 1, 0.5], [2, 3, -1.0]])
        out = bundle.extractor_forward("clin", x, "sample",
                                       NoiseRouter(1, ("r", 0)), train=True)
        assert out.shape == (2, cfg.embed_dim)

    def test_mean_mode_eval_deterministic(self):
        cfg = tiny_config(1, clinical=True)
        bundle = build_bundle(cfg, master_seed=1)
        x = np.array([[0, 1, 0.5]])
        r = NoiseRouter(1, ("r", 0))
        a = bundle.extractor_forward("clin", x, "mean", r, train=False).data
        b = bundle.extractor_forward("clin", x, "mean", r, train=False).data
        np.testing.assert_array_equal(a, b)

    def test_out_of_vocab_rejected(self):
        cfg = tiny_config(1, clinical=True)
        bundle = build_bundle(cfg, master_seed=1)
        x = np.array([[9, 1, 0.5]])
        with pytest.raises(ad.DimensionError):
            bundle.extractor_forward("clin", x, "mean", NoiseRouter(1), False)

    def test_embedding_mean_gradient_matches_fd(self):
        cfg = tiny_config(1, clinical=True)
        bundle = build_bundle(cfg, master_seed=2)
        x = np.array([[0, 1, 0.5], [1, 2, -0.3], [2, 0, 0.1]])
        router = NoiseRouter(7, ("round", 0, 0))

        def run():
            with ad.Tape() as tape:
                e = bundle.extractor_forward("clin", x, "sample", router, True)
                loss = ad.tmean(ad.multiply(e, e))
            return tape, loss

        # freeze batchnorm running stats so repeated forwards are identical
        tape, loss = run()
        grads = tape.gradients(loss)
        table = bundle.extractors["clin"].embeddings[0].table.mu
        analytic = grads.get(table)
        step = 1e-6
        flat = table.data.ravel()
        for i in range(0, flat.size, 2):
            orig = flat[i]
            flat[i] = orig + step
            fp = run()[1].item()
            flat[i] = orig - step
            fm = run()[1].item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            assert abs(analytic.ravel()[i] - num) <= 1e-5 * max(1.0, abs(num))


class TestAttentionFusion:
    def _embeddings(self, n=3, d=6, m=3, seed=0):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.normal(size=(n, d))) for _ in range(m)]

    def test_identical_embeddings_give_uniform_weights(self):
        cfg = tiny_config(2)
        fusion = AttentionFusion("fusion", 6, cfg, NoiseRouter(3, ("init",)))
        e = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        fused, alphas = fusion.forward([e, e, e], "mean", NoiseRouter(3))
        np.testing.assert_allclose(alphas.data, 1.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(fused.data, e.data, rtol=1e-12)

    def test_simplex_constraint(self):
        cfg = tiny_config(2)
        fusion = AttentionFusion("fusion", 6, cfg, NoiseRouter(4, ("init",)))
        embs = self._embeddings()
        _, alphas = fusion.forward(embs, "sample", NoiseRouter(4, ("r", 0)))
        np.testing.assert_allclose(alphas.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(alphas.data > 0)

    def test_fused_in_convex_hull(self):
        cfg = tiny_config(2)
        fusion = AttentionFusion("fusion", 6, cfg, NoiseRouter(5, ("init",)))
        embs = self._embeddings(seed=9)
        fused, _ = fusion.forward(embs, "mean", NoiseRouter(5))
        stack = np.stack([e.data for e in embs])
        assert np.all(fused.data <= stack.max(axis=0) + 1e-12)
        assert np.all(fused.data >= stack.min(axis=0) - 1e-12)

    def test_single_modality_identity(self):
        cfg = tiny_config(1)
        fusion = AttentionFusion("fusion", 6, cfg, NoiseRouter(6, ("init",)))
        e = self._embeddings(m=1)[0]
        fused, alphas = fusion.forward([e], "mean", NoiseRouter(6))
        np.testing.assert_allclose(alphas.data, 1.0)
        np.testing.assert_allclose(fused.data, e.data, rtol=1e-12)

    def test_softmax_saturation_dominates(self):
        # a +50 score gap saturates the weights (the tanh scores themselves
        # are bounded, so this exercises the softmax stage directly)
        alphas = ad.softmax(Tensor([[0.0, 50.0]]), axis=1)
        assert alphas.data[0, 0] < 1e-20  # loser weight vanishes
        assert alphas.data[0, 1] >= 1.0 - 1e-16


class TestPredictHazards:
    def test_output_length_and_range(self):
        cfg = tiny_config(2)
        bundle = build_bundle(cfg, master_seed=3)
        z = Tensor(np.random.default_rng(0).normal(size=(5, cfg.embed_dim)))
        h = predict_hazards(bundle, z, "sample", NoiseRouter(3, ("r", 0)), True)
        assert h.shape == (5, cfg.intervals)
        assert np.all(h.data > 0) and np.all(h.data < 1)

    def test_zero_risk_means_give_half(self):
        cfg = tiny_config(2)
        bundle = build_bundle(cfg, master_seed=3)
        bundle.risk.w.mu.data[:] = 0.0
        bundle.risk.b.mu.data[:] = 0.0
        z = Tensor(np.random.default_rng(1).normal(size=(3, cfg.embed_dim)))
        h = predict_hazards(bundle, z, "mean", NoiseRouter(3), False)
        np.testing.assert_allclose(h.data, 0.5, rtol=1e-12)


class TestAuxLoss:
    def test_identical_embeddings(self):
        e = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
        assert aux_loss([e, e]).item() < 1e-9

    def test_orthogonal_embeddings(self):
        a = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
        b = Tensor(np.array([[0.0, 3.0], [4.0, 0.0]]))
        np.testing.assert_allclose(aux_loss([a, b]).item(), 1.0, atol=1e-9)

    def test_antipodal_embeddings(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        b = Tensor(np.array([[-1.0, -2.0]]))
        np.testing.assert_allclose(aux_loss([a, b]).item(), 2.0, atol=1e-9)

    def test_single_modality_no_pairs(self):
        e = Tensor(np.ones((3, 4)))
        assert aux_loss([e]).item() == 0.0

    def test_zero_norm_rows_stay_finite(self):
        a = Tensor(np.zeros((2, 4)))
        b = Tensor(np.ones((2, 4)))
        val = aux_loss([a, b])
        np.testing.assert_allclose(val.item(), 1.0, atol=1e-6)


class TestTotalLoss:
    def test_arithmetic_example(self):
        np.testing.assert_allclose(total_loss(2.0, 30.0, 100, 0.4), 2.32,
                                   rtol=1e-12)

    def test_degenerate_terms(self):
        assert total_loss(1.7, 0.0, 10, 0.0) == 1.7

    def test_aux_coefficient_is_fixed(self):
        base = total_loss(0.0, 0.0, 1, 1.0)
        np.testing.assert_allclose(base, 0.05, rtol=1e-15)

    def test_taped_combine_matches_plain(self):
        nll_t = Tensor(np.array(2.0))
        kls = [Tensor(np.array(10.0)), Tensor(np.array(20.0))]
        aux_t = Tensor(np.array(0.4))
        taped = combine_loss_taped(nll_t, kls, 100, aux_t)
        np.testing.assert_allclose(taped.item(), total_loss(2.0, 30.0, 100, 0.4),
                                   rtol=1e-15)

    def test_empty_kl_terms_drop_regularizer(self):
        taped = combine_loss_taped(Tensor(np.array(1.0)), [], 10,
                                   Tensor(np.array(0.0)))
        assert taped.item() == 1.0


class TestEndToEnd:
    def _run_loss(self, bundle, cfg, xs, targets, router, dp=None):
        from vflsurv.privacy import clip_rows_taped, perturb_taped
        embs = []
        for k, name in enumerate(bundle.modality_names()):
            e = bundle.extractor_forward(name, xs[k], "sample", router, True)
            if dp is not None:
                sigma, bound = dp
                e = clip_rows_taped(e, bound)
                e = perturb_taped(e, sigma, bound, router.stream("dp-noise", k))
            embs.append(e)
        kl_terms = [bundle.client_kl(n) for n in bundle.modality_names()]
        hazards, fused, alphas = bundle.fuse_and_predict(embs, "sample", router, True)
        kl_terms.append(bundle.server_kl())
        loss = combine_loss_taped(nll_taped(hazards, targets), kl_terms, 100,
                                  aux_loss(embs))
        return loss

    def test_missing_modality_zero_tensor_finite(self):
        cfg = tiny_config(2)
        bundle = build_bundle(cfg, master_seed=9)
        rng = np.random.default_rng(4)
        n = 6
        xs = [np.zeros((n, 4)), rng.normal(size=(n, 5))]  # modality 0 missing
        grid = TimeGrid(intervals=4, t_max=8.0)
        targets = build_targets(rng.uniform(0, 8, n), rng.integers(0, 2, n), grid)
        with ad.Tape() as tape:
            loss = self._run_loss(bundle, cfg, xs, targets,
                                  NoiseRouter(9, ("round", 0, 0)))
        grads = tape.gradients(loss)
        assert np.isfinite(loss.item())
        for p in bundle.parameters():
            g = grads.get(p)
            assert g is None or np.all(np.isfinite(g))

    def test_mean_mode_is_deterministic_function(self):
        cfg = tiny_config(2)
        bundle = build_bundle(cfg, master_seed=10)
        rng = np.random.default_rng(5)
        xs = [rng.normal(size=(4, 4)), rng.normal(size=(4, 5))]
        router = NoiseRouter(10)

        def eval_hazards():
            embs = [bundle.extractor_forward(n, xs[k], "mean", router, False)
                    for k, n in enumerate(bundle.modality_names())]
            h, _, _ = bundle.fuse_and_predict(embs, "mean", router, False)
            return h.data

        np.testing.assert_array_equal(eval_hazards(), eval_hazards())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(2, clinical=True)
        bundle = build_bundle(cfg, master_seed=11)
        # give the running stats non-default values
        bundle.batchnorms()[0].running_mean[:] = 0.3
        path = tmp_path / "model.bvfl"
        save_checkpoint(path, bundle, extra={"grid/t_max": np.array(123.0)})
        with open(path, "rb") as fh:
            assert fh.read(4) == b"BVFL"
        loaded, extra = load_checkpoint(path, master_seed=11)
        for p, q in zip(bundle.parameters(), loaded.parameters()):
            assert p.name == q.name
            np.testing.assert_array_equal(p.data, q.data)
        np.testing.assert_array_equal(loaded.batchnorms()[0].running_mean, 0.3)
        np.testing.assert_array_equal(extra["grid/t_max"], 123.0)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bvfl"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
