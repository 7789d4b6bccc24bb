import math

import numpy as np
import pytest

from modmotion import autodiff as ad
from modmotion import dataset as ds
from modmotion import simworld as sw
from modmotion import training as tr
from modmotion.model import LatentSpec, ModelConfig, SeqCVAE


class TestReconstructionLoss:
    def _wrap(self, arr):
        return [ad.Tensor(arr[:, j, :]) for j in range(arr.shape[1])]

    def test_zero_for_identical(self):
        a = np.random.default_rng(0).normal(size=(2, 4, 3))
        assert tr.reconstruction_loss(self._wrap(a), a).item() == 0.0

    def test_constant_offset(self):
        a = np.random.default_rng(0).normal(size=(2, 4, 3))
        out = self._wrap(a + 0.3)
        assert tr.reconstruction_loss(out, a).item() == pytest.approx(0.09)

    def test_direct_small_case(self):
        # W=2, D=1: targets (0,0), predictions (1,3) -> (1+9)/2 = 5
        target = np.zeros((1, 2, 1))
        outs = [ad.Tensor([[1.0]]), ad.Tensor([[3.0]])]
        assert tr.reconstruction_loss(outs, target).item() == pytest.approx(5.0)

    def test_strict_mode_scales_by_channels(self):
        a = np.zeros((1, 2, 3))
        outs = [ad.Tensor([[1.0, 1.0, 1.0]]), ad.Tensor([[1.0, 1.0, 1.0]])]
        assert tr.reconstruction_loss(outs, a).item() == pytest.approx(1.0)
        assert tr.reconstruction_loss(outs, a, strict=True).item() == pytest.approx(3.0)


class TestKlLoss:
    def test_prior_equals_posterior(self):
        assert tr.kl_loss(ad.Tensor([0.0]), ad.Tensor([0.0])).item() == 0.0

    def test_unit_mean(self):
        assert tr.kl_loss(ad.Tensor([1.0]), ad.Tensor([0.0])).item() == pytest.approx(0.5)

    def test_wide_posterior(self):
        expected = 0.5 * (4 - 1 - math.log(4))
        assert tr.kl_loss(ad.Tensor([0.0]), ad.Tensor([math.log(4)])).item() == pytest.approx(expected, abs=1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            mu = ad.Tensor(rng.normal(size=(4, 3)))
            logvar = ad.Tensor(rng.normal(size=(4, 3)))
            assert tr.kl_loss(mu, logvar).item() >= 0.0


class TestBceLoss:
    def test_ln2_at_neutral_logit(self):
        assert tr.bce_loss(1.0, ad.Tensor([[0.0]])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_soft_target_minimized_at_zero_logit(self):
        at_zero = tr.bce_loss(0.5, ad.Tensor([[0.0]])).item()
        assert at_zero == pytest.approx(math.log(2), abs=1e-12)
        for logit in (-2.0, -0.5, 0.5, 2.0):
            assert tr.bce_loss(0.5, ad.Tensor([[logit]])).item() > at_zero

    def test_saturated_correct_logit(self):
        expected = math.log1p(math.exp(-20.0))  # ~2.06e-9, from the stable form
        assert tr.bce_loss(1.0, ad.Tensor([[20.0]])).item() == pytest.approx(expected, rel=1e-9)

    def test_nonnegative_and_saturating(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            y = rng.choice([0.0, 0.5, 1.0])
            logit = rng.normal() * 5
            assert tr.bce_loss(y, ad.Tensor([[logit]])).item() >= 0.0
        assert tr.bce_loss(1.0, ad.Tensor([[50.0]])).item() < 1e-12
        assert tr.bce_loss(0.0, ad.Tensor([[-50.0]])).item() < 1e-12

    def test_rejects_out_of_range_target(self):
        with pytest.raises(ValueError):
            tr.bce_loss(1.5, ad.Tensor([[0.0]]))


class TestModifierLoss:
    def test_empty_sum(self):
        assert tr.modifier_loss(np.zeros((2, 0)), []).item() == 0.0

    def test_two_identical_terms(self):
        labels = np.ones((1, 2))
        logits = [ad.Tensor([[0.0]]), ad.Tensor([[0.0]])]
        assert tr.modifier_loss(labels, logits).item() == pytest.approx(2 * math.log(2))

    def test_order_invariance(self):
        labels = np.array([[1.0, 0.0]])
        logits = [ad.Tensor([[0.7]]), ad.Tensor([[-1.2]])]
        a = tr.modifier_loss(labels, logits).item()
        b = tr.modifier_loss(labels[:, ::-1].copy(), logits[::-1]).item()
        assert a == pytest.approx(b)

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            tr.modifier_loss(np.ones((1, 2)), [ad.Tensor([[0.0]])])


class TestTotalLoss:
    def test_paper_weights_example(self):
        w = tr.LossWeights(alpha=1.0, beta=0.3, gamma=2.5)
        total = tr.total_loss(ad.Tensor(2.0), ad.Tensor(1.0), ad.Tensor(0.4), w)
        assert total.item() == pytest.approx(3.3)

    def test_baseline_reduces_to_rec_plus_kl(self):
        w = tr.LossWeights(alpha=1.0, beta=4.0, gamma=0.0)
        assert w.baseline
        total = tr.total_loss(ad.Tensor(2.0), ad.Tensor(1.0), ad.Tensor(123.0), w)
        assert total.item() == pytest.approx(6.0)

    def test_alpha_only(self):
        w = tr.LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
        assert tr.total_loss(ad.Tensor(2.0), ad.Tensor(9.0), ad.Tensor(9.0), w).item() == pytest.approx(2.0)

    def test_linear_in_each_component(self):
        w = tr.LossWeights(alpha=1.2, beta=0.7, gamma=3.0)
        base = tr.total_loss(ad.Tensor(1.0), ad.Tensor(1.0), ad.Tensor(1.0), w).item()
        bumped = tr.total_loss(ad.Tensor(2.0), ad.Tensor(1.0), ad.Tensor(1.0), w).item()
        assert bumped - base == pytest.approx(1.2)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            tr.LossWeights(alpha=0.0)


def tiny_model_config():
    return ModelConfig(
        state_dim=3, window=5, hidden_dim=8,
        latent=LatentSpec(2, 1, ("physical", "temporal")),
    )


def full_loss_scalar(model, seqs, labels, noise, weights):
    rec, kl, modi, total = tr._batch_losses(model, seqs, labels, weights, noise, False)
    return total


def test_full_model_gradient_check_tiny_config():
    """Autodiff vs central finite differences on the complete training loss."""
    weights = tr.LossWeights(alpha=1.0, beta=0.3, gamma=2.5)
    cfg = tiny_model_config()
    for seed in range(3):
        rng = np.random.default_rng(seed)
        model = SeqCVAE(cfg, rng=rng)
        seqs = rng.normal(size=(2, cfg.window, cfg.state_dim))
        labels = rng.choice([0.0, 0.5, 1.0], size=(2, 2))
        noise = rng.normal(size=(2, cfg.latent.total))

        for p in model.params.values():
            p.zero_grad()
        with ad.Graph() as g:
            total = full_loss_scalar(model, seqs, labels, noise, weights)
        g.backward(total)

        check_rng = np.random.default_rng(1000 + seed)
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            picks = check_rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + 1e-5
                fp = full_loss_scalar(model, seqs, labels, noise, weights).item()
                flat[i] = orig - 1e-5
                fm = full_loss_scalar(model, seqs, labels, noise, weights).item()
                flat[i] = orig
                fd = (fp - fm) / 2e-5
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                assert abs(fd - gflat[i]) / denom < 1e-4, f"{name}[{i}] seed {seed}"


def smoke_bundle(n_seeds=1, duration_ticks=0, hop=12):
    cfg = sw.ScenarioConfig(task="wiping", noise_scale=0.01, duration_ticks=duration_ticks)
    grid = sw.label_grid({"temporal": [0.0, 0.5, 1.0], "physical": [0.0, 0.5, 1.0]}, list(range(n_seeds)))
    demos = [sw.synthesize_demo(cfg, labels, seed) for labels, seed in grid]
    return ds.build_bundle(demos, width=50, hop=hop, stride=20, train_fraction=0.8, seed=0)


class TestTrainLoop:
    def test_short_run_decreases_loss_and_is_deterministic(self):
        bundle = smoke_bundle()
        mc = ModelConfig(state_dim=bundle.state_dim, window=50, hidden_dim=16)
        tc = tr.TrainConfig(epochs=8, batch_size=32, seed=0, eval_every=4)
        r1 = tr.train(bundle, mc, tc)
        r2 = tr.train(bundle, mc, tc)
        train_rows = [r for r in r1.history if r["split"] == "train"]
        assert train_rows[-1]["total"] < train_rows[0]["total"]
        for name in r1.model.params:
            np.testing.assert_array_equal(r1.model.params[name].data, r2.model.params[name].data)

    def test_baseline_leaves_predictor_at_init(self):
        bundle = smoke_bundle()
        mc = ModelConfig(state_dim=bundle.state_dim, window=50, hidden_dim=16)
        tc = tr.TrainConfig(epochs=2, batch_size=32, seed=0, weights=tr.LossWeights(1.0, 4.0, 0.0))
        result = tr.train(bundle, mc, tc)
        fresh = SeqCVAE(mc, rng=np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]))
        for name in fresh.params:
            if name.startswith("pred"):
                np.testing.assert_array_equal(result.model.params[name].data, fresh.params[name].data)

    def test_history_csv_and_checkpoint(self, tmp_path):
        bundle = smoke_bundle()
        mc = ModelConfig(state_dim=bundle.state_dim, window=50, hidden_dim=16)
        tc = tr.TrainConfig(epochs=2, batch_size=32, seed=0, eval_every=1)
        ckpt = tmp_path / "model.mmck"
        hist = tmp_path / "history.csv"
        result = tr.train(bundle, mc, tc, checkpoint_path=str(ckpt), history_path=str(hist))
        assert ckpt.exists() and result.fingerprint
        lines = hist.read_text().strip().splitlines()
        assert lines[0] == "epoch,split,rec,kl,modi,total"
        assert len(lines) == 1 + 2 + 2  # header + 2 train rows + 2 val rows

    def test_divergence_aborts_with_components(self):
        bundle = smoke_bundle()
        mc = ModelConfig(state_dim=bundle.state_dim, window=50, hidden_dim=16)
        tc = tr.TrainConfig(epochs=1, batch_size=32, seed=0, learning_rate=1e9)
        with pytest.raises((tr.TrainingDiverged, ValueError)):
            tr.train(bundle, mc, tc)
