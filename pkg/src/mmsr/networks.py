"""Generators, discriminators and the shared-latent pair.

G1 is a residual-block 8x upscaler, G2 a strided 1/8 downscaler, and the
discriminators are patch-level score grids for least-squares adversarial
training. The UNIT variant splits both translators into domain encoders and
decoders around a shared latent grid at low-res resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError
from .losses import SCALE, avg_downsample_f, nn_upsample_g

VARIANTS = ("sr-cyclegan", "sr-unit")


@dataclass(frozen=True)
class SRGeneratorSpec:
    """G1 layout. ``global_skip`` adds the nearest-neighbour upsampled input
    before the output activation; it is off by default because the skip makes
    the downsample-consistency term start near zero and then only grow."""

    in_channels: int = 1
    base_width: int = 64
    n_res_blocks: int = 6
    upscale_stages: int = 3
    global_skip: bool = False

    def __post_init__(self):
        if self.in_channels != 1:
            raise ParameterError("only single-channel images are supported")
        if self.base_width < 1 or self.n_res_blocks < 1:
            raise ParameterError("base_width and n_res_blocks must be positive")
        if 2**self.upscale_stages != SCALE:
            raise ParameterError(f"upscale_stages must give a {SCALE}x factor")


@dataclass(frozen=True)
class DownGeneratorSpec:
    """G2 layout. With ``global_skip`` the network predicts a correction to
    the 8x8 block average of its input, which keeps early cycle terms aligned
    with the downsample-consistency term."""

    in_channels: int = 1
    base_width: int = 64
    downscale_stages: int = 3
    n_res_blocks: int = 3
    global_skip: bool = True

    def __post_init__(self):
        if self.in_channels != 1:
            raise ParameterError("only single-channel images are supported")
        if self.base_width < 1 or self.n_res_blocks < 1:
            raise ParameterError("base_width and n_res_blocks must be positive")
        if 2**self.downscale_stages != SCALE:
            raise ParameterError(f"downscale_stages must give a 1/{SCALE} factor")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    n_layers: int = 4
    base_width: int = 64

    def __post_init__(self):
        if self.in_channels != 1:
            raise ParameterError("only single-channel images are supported")
        if self.n_layers < 1 or self.base_width < 1:
            raise ParameterError("n_layers and base_width must be positive")


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate")


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv(width, width),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            _conv(width, width),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class UpscaleStage(nn.Sequential):
    """Convolution to 4x channels followed by a 2x pixel shuffle."""

    def __init__(self, width: int):
        super().__init__(_conv(width, 4 * width), nn.PixelShuffle(2), nn.ReLU(inplace=True))


class SRGenerator(nn.Module):
    def __init__(self, spec: SRGeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.head = nn.Sequential(_conv(spec.in_channels, w, 7), nn.ReLU(inplace=True))
        self.body = nn.Sequential(*[ResidualBlock(w) for _ in range(spec.n_res_blocks)])
        self.fuse = _conv(w, w)
        self.upscale = nn.Sequential(*[UpscaleStage(w) for _ in range(spec.upscale_stages)])
        self.tail = _conv(w, spec.in_channels, 7)

    def forward(self, x):
        feat = self.head(x)
        feat = feat + self.fuse(self.body(feat))
        out = self.tail(self.upscale(feat))
        if self.spec.global_skip:
            out = out + nn_upsample_g(x, SCALE)
        return torch.tanh(out)


class DownGenerator(nn.Module):
    def __init__(self, spec: DownGeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [_conv(spec.in_channels, w, 7), nn.InstanceNorm2d(w, affine=True), nn.ReLU(inplace=True)]
        for _ in range(spec.downscale_stages):
            layers += [_conv(w, w, 3, stride=2), nn.InstanceNorm2d(w, affine=True), nn.ReLU(inplace=True)]
        self.head = nn.Sequential(*layers)
        self.body = nn.Sequential(*[ResidualBlock(w) for _ in range(spec.n_res_blocks)])
        self.tail = _conv(w, spec.in_channels, 7)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % SCALE or w % SCALE:
            raise ShapeError(f"input {h}x{w} is not divisible by {SCALE}")
        out = self.tail(self.body(self.head(x)))
        if self.spec.global_skip:
            out = out + avg_downsample_f(x, SCALE)
        return torch.tanh(out)


class PatchDiscriminator(nn.Module):
    """Strided convolutions ending in a one-channel grid of realness scores."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        cin = w
        for i in range(1, spec.n_layers):
            cout = w * min(2**i, 8)
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _seeded(build, seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_sr_generator(spec: SRGeneratorSpec = SRGeneratorSpec(), seed: int = 0) -> SRGenerator:
    return _seeded(lambda: SRGenerator(spec), seed)


def build_down_generator(spec: DownGeneratorSpec = DownGeneratorSpec(), seed: int = 0) -> DownGenerator:
    return _seeded(lambda: DownGenerator(spec), seed)


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0) -> PatchDiscriminator:
    return _seeded(lambda: PatchDiscriminator(spec), seed)


# --- shared latent (UNIT) -------------------------------------------------


class UnitPair(nn.Module):
    """Domain encoders/decoders meeting in a shared latent grid.

    Latents live at the low-res resolution (H x W for a H x W clinical patch
    or a 8H x 8W micro patch). The last encoder block and the first decoder
    block are shared between domains.
    """

    def __init__(self, sr_spec: SRGeneratorSpec, down_spec: DownGeneratorSpec):
        super().__init__()
        if sr_spec.base_width != down_spec.base_width:
            raise ShapeError(
                f"latent channel mismatch: {sr_spec.base_width} vs {down_spec.base_width}"
            )
        w = sr_spec.base_width
        self.sr_spec, self.down_spec = sr_spec, down_spec
        n_lr = max(sr_spec.n_res_blocks // 2, 1)
        self.enc_lr = nn.Sequential(
            _conv(1, w, 7), nn.InstanceNorm2d(w, affine=True), nn.ReLU(inplace=True),
            *[ResidualBlock(w) for _ in range(n_lr)],
        )
        hr = [_conv(1, w, 7), nn.InstanceNorm2d(w, affine=True), nn.ReLU(inplace=True)]
        for _ in range(down_spec.downscale_stages):
            hr += [_conv(w, w, 3, stride=2), nn.InstanceNorm2d(w, affine=True), nn.ReLU(inplace=True)]
        hr += [ResidualBlock(w) for _ in range(down_spec.n_res_blocks)]
        self.enc_hr = nn.Sequential(*hr)
        self.shared_enc = ResidualBlock(w)
        self.shared_dec = ResidualBlock(w)
        self.dec_lr = nn.Sequential(
            *[ResidualBlock(w) for _ in range(down_spec.n_res_blocks)], _conv(w, 1, 7)
        )
        self.dec_hr = nn.Sequential(
            *[ResidualBlock(w) for _ in range(n_lr)],
            *[UpscaleStage(w) for _ in range(sr_spec.upscale_stages)],
            _conv(w, 1, 7),
        )

    def encode_lr(self, x):
        return self.shared_enc(self.enc_lr(x))

    def encode_hr(self, y):
        h, w = y.shape[-2:]
        if h % SCALE or w % SCALE:
            raise ShapeError(f"input {h}x{w} is not divisible by {SCALE}")
        return self.shared_enc(self.enc_hr(y))

    def decode_lr(self, z):
        return torch.tanh(self.dec_lr(self.shared_dec(z)))

    def decode_hr(self, z):
        return torch.tanh(self.dec_hr(self.shared_dec(z)))

    def group_prefixes(self) -> dict[str, tuple[str, ...]]:
        """Parameter-name prefixes forming the g1 / g2 / latent groups."""
        return {
            "g1": ("enc_lr.", "dec_hr."),
            "g2": ("enc_hr.", "dec_lr."),
            "latent": ("shared_enc.", "shared_dec."),
        }


class UnitTranslator(nn.Module):
    """Cross-domain path through a :class:`UnitPair` (latent means, no noise)."""

    def __init__(self, pair: UnitPair, direction: str):
        super().__init__()
        if direction not in ("lr->hr", "hr->lr"):
            raise ParameterError(direction)
        # stored outside the module tree so the pair's parameters are owned once
        self.__dict__["pair"] = pair
        self.direction = direction

    def forward(self, x):
        if self.direction == "lr->hr":
            return self.pair.decode_hr(self.pair.encode_lr(x))
        return self.pair.decode_lr(self.pair.encode_hr(x))

    def train(self, mode: bool = True):
        self.pair.train(mode)
        return super().train(mode)

    def parameters(self, recurse: bool = True):
        return self.pair.parameters(recurse)


def build_unit_pair(
    sr_spec: SRGeneratorSpec = SRGeneratorSpec(),
    down_spec: DownGeneratorSpec = DownGeneratorSpec(),
    seed: int = 0,
) -> UnitPair:
    pair = _seeded(lambda: UnitPair(sr_spec, down_spec), seed)
    with torch.no_grad():
        # shared-latent contract is checked on a minimal probe
        z_lr = pair.encode_lr(torch.zeros(1, 1, 8, 8))
        z_hr = pair.encode_hr(torch.zeros(1, 1, 8 * SCALE, 8 * SCALE))
    if z_lr.shape != z_hr.shape:
        raise ShapeError(f"encoder latents differ: {tuple(z_lr.shape)} vs {tuple(z_hr.shape)}")
    return pair


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelBundle:
    """All trainable networks of one experiment.

    For ``sr-cyclegan`` ``g1``/``g2`` are standalone generators and ``unit`` is
    None. For ``sr-unit`` they are translators over ``unit``, whose parameters
    split into the g1, g2 and shared-latent groups.
    """

    variant: str
    g1: nn.Module
    g2: nn.Module
    d_x: nn.Module
    d_y: nn.Module
    sr_spec: SRGeneratorSpec
    down_spec: DownGeneratorSpec
    dx_spec: DiscriminatorSpec
    dy_spec: DiscriminatorSpec
    unit: Optional[UnitPair] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if (self.variant == "sr-unit") != (self.unit is not None):
            raise ParameterError("sr-unit bundles need a UnitPair; sr-cyclegan bundles must not have one")

    def generator_parameters(self):
        if self.unit is not None:
            return list(self.unit.parameters())
        return list(self.g1.parameters()) + list(self.g2.parameters())

    def discriminator_parameters(self):
        return list(self.d_x.parameters()) + list(self.d_y.parameters())

    def param_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        """Named parameter sets: g1, g2, dx, dy and (UNIT only) latent."""
        groups = {"dx": self.d_x.state_dict(), "dy": self.d_y.state_dict()}
        if self.unit is None:
            groups["g1"] = self.g1.state_dict()
            groups["g2"] = self.g2.state_dict()
        else:
            full = self.unit.state_dict()
            for name, prefixes in self.unit.group_prefixes().items():
                groups[name] = {k: v for k, v in full.items() if k.startswith(prefixes)}
        return groups

    def load_param_groups(self, groups: dict[str, dict[str, torch.Tensor]]):
        self.d_x.load_state_dict(groups["dx"])
        self.d_y.load_state_dict(groups["dy"])
        if self.unit is None:
            self.g1.load_state_dict(groups["g1"])
            self.g2.load_state_dict(groups["g2"])
        else:
            merged = {}
            for name in ("g1", "g2", "latent"):
                merged.update(groups[name])
            self.unit.load_state_dict(merged)

    def specs(self) -> dict:
        return {
            "sr": asdict(self.sr_spec),
            "down": asdict(self.down_spec),
            "dx": asdict(self.dx_spec),
            "dy": asdict(self.dy_spec),
        }

    def eval(self):
        for m in (self.g1, self.g2, self.d_x, self.d_y):
            m.eval()
        return self

    def train(self):
        for m in (self.g1, self.g2, self.d_x, self.d_y):
            m.train()
        return self


def build_bundle(
    variant: str = "sr-cyclegan",
    sr_spec: SRGeneratorSpec = SRGeneratorSpec(),
    down_spec: DownGeneratorSpec = DownGeneratorSpec(),
    dx_spec: DiscriminatorSpec = DiscriminatorSpec(),
    dy_spec: DiscriminatorSpec = DiscriminatorSpec(),
    seed: int = 0,
) -> ModelBundle:
    """Build every network of an experiment with seeds derived from ``seed``."""
    d_x = build_discriminator(dx_spec, seed + 2)
    d_y = build_discriminator(dy_spec, seed + 3)
    if variant == "sr-unit":
        pair = build_unit_pair(sr_spec, down_spec, seed)
        return ModelBundle(
            variant, UnitTranslator(pair, "lr->hr"), UnitTranslator(pair, "hr->lr"),
            d_x, d_y, sr_spec, down_spec, dx_spec, dy_spec, unit=pair,
        )
    if variant != "sr-cyclegan":
        raise ParameterError(f"unknown variant {variant!r}")
    return ModelBundle(
        variant, build_sr_generator(sr_spec, seed), build_down_generator(down_spec, seed + 1),
        d_x, d_y, sr_spec, down_spec, dx_spec, dy_spec,
    )
