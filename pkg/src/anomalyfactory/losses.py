"""Training objectives: perceptual, conditional adversarial, heatmap and totals.

Sign conventions: the discriminator objective ``d_loss`` is returned in its
maximization form, log(sigmoid(real)) + log(1 - sigmoid(fake)); it peaks at 0
for a perfect discriminator and equals -2*ln2 when the discriminator outputs
probability 0.5 everywhere. The optimizer minimizes its negation. The
generator term ``g_loss`` is the non-saturating -log(sigmoid(fake)) and is
minimized directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ContractError, NumericalError

LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class LossWeights:
    w_fh: float = 10.0
    w_bh: float = 10.0
    perceptual_layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.w_fh < 0 or self.w_bh < 0:
            raise ContractError("heatmap loss weights must be >= 0")


class RandomConvFeatures(nn.Module):
    """Frozen, seeded convolutional feature pyramid used as a perceptual metric.

    Tap 0 is the raw input; taps 1..4 follow each conv block. The weights are
    drawn once from a seeded normal distribution and never trained, keeping
    the metric fixed and the test suite hermetic.
    """

    widths = (16, 32, 64, 64)
    strides = (1, 2, 2, 2)

    def __init__(self, taps: tuple[int, ...] = (1, 2, 3, 4), seed: int = 0):
        super().__init__()
        self.taps = tuple(taps)
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        c_in = 3
        for width, stride in zip(self.widths, self.strides):
            conv = nn.Conv2d(c_in, width, 3, stride=stride, padding=1)
            conv.weight.data.normal_(0.0, (2.0 / (9 * c_in)) ** 0.5, generator=gen)
            conv.bias.data.zero_()
            blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            c_in = width
        self.blocks = nn.ModuleList(blocks)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = [x]
        for block in self.blocks:
            features.append(block(features[-1]))
        return [features[i] for i in self.taps]


class PretrainedPerceptualFeatures(nn.Module):
    """Opt-in perceptual extractor backed by torchvision's VGG16 (needs weights)."""

    tap_layers = (3, 8, 15, 22)  # relu1_2, relu2_2, relu3_3, relu4_3

    def __init__(self, taps: tuple[int, ...] = (1, 2, 3, 4)):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        self.taps = tuple(taps)
        self.features = vgg16(weights=VGG16_Weights.DEFAULT).features[: self.tap_layers[-1] + 1]
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs = [x]
        feat = x
        for idx, layer in enumerate(self.features):
            feat = layer(feat)
            if idx in self.tap_layers:
                outputs.append(feat)
        return [outputs[i] for i in self.taps]


def build_feature_extractor(
    kind: str = "fixed-random-conv", taps: tuple[int, ...] = (1, 2, 3, 4), seed: int = 0
) -> nn.Module:
    if kind == "fixed-random-conv":
        return RandomConvFeatures(taps=taps, seed=seed)
    if kind == "pretrained-perceptual":
        return PretrainedPerceptualFeatures(taps=taps)
    raise ConfigError(f"unknown feature extractor kind {kind!r}")


def perceptual_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    fx: nn.Module,
    weights: LossWeights | None = None,
) -> torch.Tensor:
    """Weighted mean absolute feature difference over the extractor's taps."""
    if generated.shape != target.shape:
        raise ContractError(f"perceptual_loss: shapes differ {generated.shape} vs {target.shape}")
    weights = weights or LossWeights()
    feats_a = fx(generated)
    feats_b = fx(target)
    layer_weights = weights.perceptual_layer_weights
    if len(layer_weights) != len(feats_a):
        raise ContractError(
            f"{len(feats_a)} taps but {len(layer_weights)} perceptual layer weights"
        )
    total = generated.new_zeros(())
    for w, fa, fb in zip(layer_weights, feats_a, feats_b):
        total = total + w * (fa - fb).abs().mean()
    return total


def _check_finite(logits: list[torch.Tensor]) -> None:
    for i, l in enumerate(logits):
        if not torch.isfinite(l).all():
            bad = (~torch.isfinite(l)).sum().item()
            raise NumericalError(f"non-finite discriminator logits at scale {i}: {bad} values")


def d_objective_from_logits(
    real_logits: list[torch.Tensor], fake_logits: list[torch.Tensor]
) -> torch.Tensor:
    """log(sig(real)) + log(1 - sig(fake)), averaged over patches then scales."""
    _check_finite(real_logits)
    _check_finite(fake_logits)
    terms = []
    for real, fake in zip(real_logits, fake_logits):
        real = real.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        fake = fake.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        terms.append(F.logsigmoid(real).mean() + F.logsigmoid(-fake).mean())
    return torch.stack(terms).mean()


def g_loss_from_logits(fake_logits: list[torch.Tensor]) -> torch.Tensor:
    """Non-saturating generator loss -log(sig(fake)); its gradient pushes logits up."""
    _check_finite(fake_logits)
    terms = [-F.logsigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean() for l in fake_logits]
    return torch.stack(terms).mean()


def adversarial_losses(
    e_t: torch.Tensor,
    i_r: torch.Tensor,
    i_t: torch.Tensor,
    i_gen: torch.Tensor,
    disc,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditioned real/fake objectives: returns (d_loss, g_loss).

    ``disc`` is called as disc(e_t, i_r, candidate) and must return a list of
    patch logit maps. d_loss sees the generated image detached; g_loss keeps
    the generator in the graph.
    """
    real_logits = disc(e_t, i_r, i_t)
    fake_logits_d = disc(e_t, i_r, i_gen.detach())
    d_loss = d_objective_from_logits(real_logits, fake_logits_d)
    fake_logits_g = disc(e_t, i_r, i_gen)
    g_loss = g_loss_from_logits(fake_logits_g)
    return d_loss, g_loss


def heatmap_loss(h: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Mean squared error between a heatmap and its supervision map, both in [0,1]."""
    if h.shape != m.shape:
        raise ContractError(f"heatmap_loss: shapes differ {h.shape} vs {m.shape}")
    return ((h - m) ** 2).mean()


def total_loss(stage: str, l_g, l_d, l_h=None, weights: LossWeights | None = None):
    """Per-stage total: boot = L_G + L_D; flare/blaze add the weighted heatmap term.

    Arithmetic is performed in the type of the inputs (python floats stay
    float64, tensors stay tensors).
    """
    weights = weights or LossWeights()
    if stage == "boot":
        if l_h is not None:
            raise ContractError("boot stage takes no heatmap loss term")
        return l_g + l_d
    if stage in ("flare", "blaze"):
        if l_h is None:
            raise ContractError(f"{stage} stage requires a heatmap loss term")
        w = weights.w_fh if stage == "flare" else weights.w_bh
        return w * l_h + l_g + l_d
    raise ContractError(f"unknown stage {stage!r}")
