"""The unified generator/discriminator pair shared by all three training stages.

The generator encodes a concatenated (edge map, reference image) input, then
splits into a texture decoder and a heatmap decoder whose outputs are combined
by a parameter-free convex fusion: out = ref * (1 - h) + texture * h. The same
graph serves generation (h marks where anomaly texture is blended in) and
localization (h IS the anomaly prediction).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datamodel import check_aligned, validate_edge, validate_image
from .errors import ConfigError, ContractError

STAGES = ("boot", "flare", "blaze")


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    num_scales: int = 4
    num_resblocks: int = 4
    noise_dim: int = 64
    noise_scale: float = 0.1
    channel_cap_mult: int = 8
    heatmap_activation: str = "sigmoid"
    disc_scales: int = 2
    disc_layers: int = 3

    def __post_init__(self) -> None:
        if self.num_scales < 2:
            raise ConfigError(f"num_scales must be >= 2, got {self.num_scales}")
        if self.noise_dim < 0:
            raise ConfigError(f"noise_dim must be >= 0, got {self.noise_dim}")
        if self.heatmap_activation != "sigmoid":
            raise ConfigError(f"unknown heatmap activation {self.heatmap_activation!r}")

    def channels_at(self, scale: int) -> int:
        return self.base_channels * min(2**scale, self.channel_cap_mult)

    def check_resolution(self, height: int, width: int) -> None:
        div = 2**self.num_scales
        if height % div or width % div:
            raise ConfigError(
                f"resolution {height}x{width} not divisible by 2^num_scales = {div}"
            )


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)


class ResnetBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _decoder(config: GeneratorConfig, out_channels: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for scale in reversed(range(config.num_scales)):
        c_in, c_out = config.channels_at(scale + 1), config.channels_at(scale)
        layers += [
            nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
        ]
    layers += [nn.Conv2d(config.base_channels, out_channels, 7, padding=3), nn.Sigmoid()]
    return nn.Sequential(*layers)


class UnifiedGenerator(nn.Module):
    """Shared encoder, bottleneck resblocks, separate texture/heatmap decoders."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        enc: list[nn.Module] = [
            nn.Conv2d(4, config.base_channels, 7, padding=3),
            _norm(config.base_channels),
            nn.ReLU(inplace=True),
        ]
        for scale in range(config.num_scales):
            c_in, c_out = config.channels_at(scale), config.channels_at(scale + 1)
            enc += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), _norm(c_out), nn.ReLU(inplace=True)]
        self.encoder = nn.Sequential(*enc)
        bottleneck = config.channels_at(config.num_scales)
        self.resblocks = nn.Sequential(*[ResnetBlock(bottleneck) for _ in range(config.num_resblocks)])
        self.texture_decoder = _decoder(config, 3)
        self.heatmap_decoder = _decoder(config, 1)

    def forward(
        self, edge: torch.Tensor, ref: torch.Tensor, noise: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (texture, heatmap, fused output) for batched (B,1,H,W)/(B,3,H,W) inputs."""
        self.config.check_resolution(ref.shape[2], ref.shape[3])
        feat = self.resblocks(self.encoder(torch.cat([edge, ref], dim=1)))
        if noise is not None:
            c = min(noise.shape[1], feat.shape[1])
            scale = self.config.noise_scale * feat.detach().std()
            feat = feat.clone()
            feat[:, :c] = feat[:, :c] + noise[:, :c] * scale
        texture = self.texture_decoder(feat)
        heatmap = self.heatmap_decoder(feat)
        return texture, heatmap, fuse(ref, texture, heatmap)


class PatchDiscriminator(nn.Module):
    """PatchGAN over a conditioned 7-channel input (edge + reference + candidate)."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        ndf = config.base_channels
        layers: list[nn.Module] = [nn.Conv2d(7, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        c = ndf
        for _ in range(1, config.disc_layers):
            c_out = min(c * 2, ndf * 8)
            layers += [nn.Conv2d(c, c_out, 4, stride=2, padding=1), _norm(c_out), nn.LeakyReLU(0.2, True)]
            c = c_out
        c_out = min(c * 2, ndf * 8)
        layers += [nn.Conv2d(c, c_out, 4, stride=1, padding=1), _norm(c_out), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(c_out, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MultiScaleDiscriminator(nn.Module):
    """One PatchGAN per scale; the input is average-pooled between scales."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(PatchDiscriminator(config) for _ in range(config.disc_scales))

    def forward(
        self, edge: torch.Tensor, ref: torch.Tensor, candidate: torch.Tensor
    ) -> list[torch.Tensor]:
        x = torch.cat([edge, ref, candidate], dim=1)
        logits = []
        for disc in self.scales:
            logits.append(disc(x))
            x = nn.functional.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
        return logits


def fuse(i_in, t, h):
    """Convex blend: i_in * (1 - h) + t * h, with h broadcast across channels.

    Works on numpy arrays (H, W, C) with (H, W, 1) heatmaps and on torch
    tensors (B, C, H, W) with (B, 1, H, W) heatmaps alike.
    """
    def spatial(a):
        return tuple(a.shape[:2]) if a.ndim == 3 else tuple(a.shape[-2:])

    if i_in.shape != t.shape:
        raise ContractError(f"fuse: image shapes differ: {i_in.shape} vs {t.shape}")
    if spatial(h) != spatial(i_in):
        raise ContractError(f"fuse: heatmap shape {h.shape} incompatible with {i_in.shape}")
    h_vals = h.detach() if hasattr(h, "detach") else h
    if float(h_vals.min()) < 0.0 or float(h_vals.max()) > 1.0:
        raise ContractError("fuse: heatmap values outside [0, 1]")
    return i_in * (1.0 - h) + t * h


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()


@dataclass
class StageWeights:
    """A generator/discriminator pair tagged with its training stage."""

    stage: str
    config: GeneratorConfig
    generator: UnifiedGenerator
    discriminator: MultiScaleDiscriminator

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}; expected one of {STAGES}")

    @classmethod
    def initialize(cls, stage: str, config: GeneratorConfig, seed: int = 0) -> "StageWeights":
        generator = UnifiedGenerator(config)
        discriminator = MultiScaleDiscriminator(config)
        _init_weights(generator, seed)
        _init_weights(discriminator, seed + 1)
        return cls(stage=stage, config=config, generator=generator, discriminator=discriminator)

    def clone_as(self, stage: str) -> "StageWeights":
        """Deep-copy the weights into a new stage tag (warm start for the next stage)."""
        return StageWeights(
            stage=stage,
            config=self.config,
            generator=copy.deepcopy(self.generator),
            discriminator=copy.deepcopy(self.discriminator),
        )

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [(f"G.{k}", tuple(v.shape)) for k, v in self.generator.state_dict().items()]
        shapes += [(f"D.{k}", tuple(v.shape)) for k, v in self.discriminator.state_dict().items()]
        return shapes

    def fingerprint(self) -> str:
        """Content hash over all parameters; equal iff weights are bit-identical."""
        import hashlib

        digest = hashlib.sha256()
        for _, tensor in self.generator.state_dict().items():
            digest.update(tensor.numpy().tobytes())
        for _, tensor in self.discriminator.state_dict().items():
            digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()


def to_tensor(array: np.ndarray) -> torch.Tensor:
    """(H, W, C) float numpy -> (1, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float().unsqueeze(0)


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) float32 numpy."""
    return tensor.squeeze(0).permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)


def make_noise(
    config: GeneratorConfig, height: int, width: int, seed: int, batch: int = 1
) -> torch.Tensor | None:
    """Seeded bottleneck noise of noise_dim channels at the encoded resolution."""
    if config.noise_dim == 0:
        return None
    gen = torch.Generator().manual_seed(seed)
    h = height // 2**config.num_scales
    w = width // 2**config.num_scales
    return torch.randn((batch, config.noise_dim, h, w), generator=gen)


def generator_forward(
    e_t: np.ndarray,
    i_r: np.ndarray,
    noise_seed: int | None,
    weights: StageWeights,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-sample inference: returns (texture, heatmap, fused output) arrays."""
    validate_edge(e_t)
    validate_image(i_r)
    check_aligned(e_t, i_r)
    weights.config.check_resolution(*e_t.shape[:2])
    noise = None
    if noise_seed is not None:
        noise = make_noise(weights.config, e_t.shape[0], e_t.shape[1], noise_seed)
    weights.generator.eval()
    with torch.no_grad():
        t, h, i_out = weights.generator(to_tensor(e_t), to_tensor(i_r), noise)
    return to_array(t), to_array(h), to_array(i_out)


def discriminator_forward(
    e_t: np.ndarray, i_r: np.ndarray, candidate: np.ndarray, weights: StageWeights
) -> list[np.ndarray]:
    """Single-sample conditioned patch logits, one map per discriminator scale."""
    validate_edge(e_t)
    validate_image(i_r)
    validate_image(candidate, name="candidate")
    check_aligned(e_t, i_r, candidate)
    weights.discriminator.eval()
    with torch.no_grad():
        logits = weights.discriminator(to_tensor(e_t), to_tensor(i_r), to_tensor(candidate))
    return [to_array(l) for l in logits]


def save_checkpoint(weights: StageWeights, path: str | Path) -> None:
    """Atomically persist stage tag, config and both parameter sets."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": weights.stage,
        "config": asdict(weights.config),
        "generator": weights.generator.state_dict(),
        "discriminator": weights.discriminator.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect_stage: str | None = None) -> StageWeights:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    config = GeneratorConfig(**payload["config"])
    weights = StageWeights.initialize(payload["stage"], config, seed=0)
    weights.generator.load_state_dict(payload["generator"])
    weights.discriminator.load_state_dict(payload["discriminator"])
    if expect_stage is not None and weights.stage != expect_stage:
        raise ContractError(f"checkpoint stage {weights.stage!r}, expected {expect_stage!r}")
    return weights
