import math

import numpy as np
import pytest
import torch

from anomalyfactory.errors import ConfigError, ContractError, NumericalError
from anomalyfactory.losses import (
    LossWeights,
    RandomConvFeatures,
    adversarial_losses,
    build_feature_extractor,
    d_objective_from_logits,
    g_loss_from_logits,
    heatmap_loss,
    perceptual_loss,
    total_loss,
)


def _rand(shape, seed, double=False):
    rng = np.random.default_rng(seed)
    t = torch.from_numpy(rng.random(shape))
    return t if double else t.float()


class TestPerceptualLoss:
    def test_identical_inputs_zero(self):
        fx = build_feature_extractor(seed=0)
        a = _rand((1, 3, 8, 8), 1)
        assert float(perceptual_loss(a, a.clone(), fx)) == 0.0

    def test_symmetry(self):
        fx = build_feature_extractor(seed=0)
        a, b = _rand((1, 3, 8, 8), 2), _rand((1, 3, 8, 8), 3)
        assert float(perceptual_loss(a, b, fx)) == pytest.approx(
            float(perceptual_loss(b, a, fx)), rel=1e-6
        )

    def test_raw_pixel_tap_equals_mean_abs_diff(self):
        # oracle: a single tap at the raw-pixel layer reduces to mean |a - b|
        fx = build_feature_extractor(taps=(0,), seed=0)
        weights = LossWeights(perceptual_layer_weights=(1.0,))
        for seed in range(5):
            a, b = _rand((1, 3, 8, 8), 10 + seed), _rand((1, 3, 8, 8), 20 + seed)
            expected = float((a - b).abs().mean())
            assert float(perceptual_loss(a, b, fx, weights)) == pytest.approx(expected, rel=1e-6)

    def test_tap_weight_mismatch_rejected(self):
        fx = build_feature_extractor(taps=(0, 1), seed=0)
        weights = LossWeights(perceptual_layer_weights=(1.0,))
        with pytest.raises(ContractError):
            perceptual_loss(_rand((1, 3, 8, 8), 4), _rand((1, 3, 8, 8), 5), fx, weights)

    def test_extractor_is_frozen(self):
        fx = build_feature_extractor(seed=0)
        before = {k: v.clone() for k, v in fx.state_dict().items()}
        a = _rand((1, 3, 8, 8), 6).requires_grad_(True)
        b = _rand((1, 3, 8, 8), 7)
        perceptual_loss(a, b, fx).backward()
        assert a.grad is not None
        for p in fx.parameters():
            assert p.grad is None
        for k, v in fx.state_dict().items():
            assert torch.equal(v, before[k])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            build_feature_extractor("made-up")


class TestAdversarialLosses:
    def test_probability_half_gives_minus_two_ln_two(self):
        # logits 0 => sigmoid 0.5 => log(0.5) + log(0.5) per patch
        zeros = [torch.zeros((1, 1, 3, 3))]
        d = d_objective_from_logits(zeros, [torch.zeros((1, 1, 3, 3))])
        assert float(d) == pytest.approx(-2.0 * math.log(2.0), rel=1e-6)

    def test_perfect_discriminator_approaches_zero_from_below(self):
        big = [torch.full((1, 1, 2, 2), 12.0)]
        low = [torch.full((1, 1, 2, 2), -12.0)]
        d = float(d_objective_from_logits(big, low))
        assert -1e-4 < d < 0.0

    def test_g_loss_gradient_pushes_logits_up(self):
        # finite differences on a single-patch toy: slope must be negative
        logit = torch.zeros((1, 1, 1, 1), dtype=torch.float64, requires_grad=True)
        loss = g_loss_from_logits([logit])
        loss.backward()
        eps = 1e-4
        up = float(g_loss_from_logits([torch.full_like(logit, eps)]))
        down = float(g_loss_from_logits([torch.full_like(logit, -eps)]))
        fd = (up - down) / (2 * eps)
        assert fd < 0.0
        assert float(logit.grad) == pytest.approx(fd, rel=1e-3)

    def test_full_pipeline_signature(self):
        calls = []

        def disc(e, i, c):
            calls.append(c)
            return [c.mean(dim=1, keepdim=True)]

        e = _rand((1, 1, 4, 4), 8)
        i_r, i_t, i_gen = (_rand((1, 3, 4, 4), s) for s in (9, 10, 11))
        i_gen = i_gen.requires_grad_(True)
        d_loss, g_loss = adversarial_losses(e, i_r, i_t, i_gen, disc)
        assert len(calls) == 3
        assert calls[1].requires_grad is False  # fake detached for the D pass
        g_loss.backward()
        assert i_gen.grad is not None

    def test_non_finite_logits_rejected(self):
        bad = [torch.full((1, 1, 2, 2), float("nan"))]
        with pytest.raises(NumericalError):
            d_objective_from_logits(bad, bad)


class TestHeatmapLoss:
    def test_equal_maps_zero(self):
        m = (_rand((1, 1, 8, 8), 12) > 0.5).float()
        assert float(heatmap_loss(m, m.clone())) == 0.0

    def test_max_error_one(self):
        h = torch.ones((1, 1, 8, 8))
        m = torch.zeros((1, 1, 8, 8))
        assert float(heatmap_loss(h, m)) == 1.0

    def test_half_everywhere_quarter(self):
        h = torch.full((1, 1, 8, 8), 0.5)
        m = (_rand((1, 1, 8, 8), 13) > 0.5).float()
        assert float(heatmap_loss(h, m)) == pytest.approx(0.25, abs=1e-7)

    def test_symmetric(self):
        h = _rand((1, 1, 8, 8), 14)
        m = (_rand((1, 1, 8, 8), 15) > 0.5).float()
        assert float(heatmap_loss(h, m)) == pytest.approx(float(heatmap_loss(m, h)), abs=1e-7)

    def test_strictly_convex_in_h(self):
        m = (_rand((1, 1, 6, 6), 16) > 0.5).float()
        h1, h2 = _rand((1, 1, 6, 6), 17), _rand((1, 1, 6, 6), 18)
        mid = float(heatmap_loss((h1 + h2) / 2, m))
        chord = 0.5 * (float(heatmap_loss(h1, m)) + float(heatmap_loss(h2, m)))
        assert mid < chord


class TestTotalLoss:
    def test_flare_arithmetic(self):
        total = total_loss("flare", 1.0, 0.5, 0.04, LossWeights(w_fh=10.0))
        assert abs(total - 1.9) <= 1e-9

    def test_boot_equals_zero_weight_flare(self):
        weights = LossWeights(w_fh=0.0)
        assert total_loss("boot", 1.2, 0.3) == total_loss("flare", 1.2, 0.3, 123.0, weights)

    def test_blaze_mirrors_flare(self):
        weights = LossWeights(w_fh=10.0, w_bh=10.0)
        assert total_loss("flare", 0.7, 0.1, 0.05, weights) == total_loss(
            "blaze", 0.7, 0.1, 0.05, weights
        )

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            total_loss("boot", 1.0, 0.5, 0.1)
        with pytest.raises(ContractError):
            total_loss("flare", 1.0, 0.5)
        with pytest.raises(ContractError):
            total_loss("spark", 1.0, 0.5)

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(w_fh=-1.0)


def _fd_check(loss_fn, tensor, coords, eps=1e-4, rel_tol=1e-3):
    """Central finite differences vs autodiff at the given flat coordinates."""
    tensor = tensor.clone().requires_grad_(True)
    loss = loss_fn(tensor)
    (grad,) = torch.autograd.grad(loss, tensor)
    for k in coords:
        with torch.no_grad():
            perturbed = tensor.detach().clone()
            perturbed.view(-1)[k] += eps
            up = float(loss_fn(perturbed))
            perturbed.view(-1)[k] -= 2 * eps
            down = float(loss_fn(perturbed))
        fd = (up - down) / (2 * eps)
        ad = float(grad.view(-1)[k])
        assert abs(ad - fd) / max(abs(fd), 1e-8) < rel_tol, f"coord {k}: {ad} vs {fd}"


class TestFiniteDifferenceGradients:
    """Central differences at 8x8, step 1e-4, relative tolerance 1e-3."""

    def _coords(self, n, total, seed):
        return [int(k) for k in np.random.default_rng(seed).choice(total, n, replace=False)]

    def test_perceptual_loss_grad(self):
        fx = build_feature_extractor(seed=1).double()
        target = _rand((1, 3, 8, 8), 30, double=True)
        gen = _rand((1, 3, 8, 8), 31, double=True)
        _fd_check(lambda t: perceptual_loss(t, target, fx), gen,
                  self._coords(10, gen.numel(), 0))

    def test_heatmap_loss_grad(self):
        m = (_rand((1, 1, 8, 8), 32, double=True) > 0.5).double()
        h = _rand((1, 1, 8, 8), 33, double=True)
        _fd_check(lambda t: heatmap_loss(t, m), h, self._coords(10, h.numel(), 1))

    def test_d_objective_grad_wrt_real_logits(self):
        fake = [_rand((1, 1, 8, 8), 34, double=True) * 2 - 1]
        real = _rand((1, 1, 8, 8), 35, double=True) * 2 - 1
        _fd_check(lambda t: d_objective_from_logits([t], fake), real,
                  self._coords(10, real.numel(), 2))

    def test_d_objective_grad_wrt_fake_logits(self):
        real = [_rand((1, 1, 8, 8), 36, double=True) * 2 - 1]
        fake = _rand((1, 1, 8, 8), 37, double=True) * 2 - 1
        _fd_check(lambda t: d_objective_from_logits(real, [t]), fake,
                  self._coords(10, fake.numel(), 3))

    def test_g_loss_grad(self):
        fake = _rand((1, 1, 8, 8), 38, double=True) * 2 - 1
        _fd_check(lambda t: g_loss_from_logits([t]), fake, self._coords(10, fake.numel(), 4))


class TestRandomConvFeatures:
    def test_seeded_and_reproducible(self):
        a = RandomConvFeatures(seed=5)
        b = RandomConvFeatures(seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_tap_zero_is_raw_input(self):
        fx = RandomConvFeatures(taps=(0,), seed=0)
        x = _rand((1, 3, 8, 8), 40)
        (out,) = fx(x)
        assert torch.equal(out, x)
