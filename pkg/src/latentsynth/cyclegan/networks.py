"""Generator and discriminators for the rolled <-> latent CycleGAN.

Generator: ResNet-style encoder / 6 residual blocks / decoder with instance
normalization and LeakyReLU(0.2).  Each domain is judged by a global
discriminator (one score per image) and a PatchGAN discriminator (a grid of
per-patch scores); both use plain ReLU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
from torch import Tensor


@dataclass(frozen=True)
class GeneratorSpec:
    residual_blocks: int = 6
    alpha: float = 0.2
    ngf: int = 64
    # identity_init: generator predicts a residual over its input with a
    # zero-initialized head, so an untrained model maps x -> x
    identity_init: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    ndf: int = 64
    patch_layers: int = 3

    def as_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, alpha: float):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.LeakyReLU(alpha),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        ngf, a = spec.ngf, spec.alpha
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.LeakyReLU(a),
        ]
        ch = ngf
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.LeakyReLU(a)]
            ch *= 2
        layers += [ResidualBlock(ch, a) for _ in range(spec.residual_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.LeakyReLU(a),
            ]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, 7))
        if spec.identity_init:
            nn.init.zeros_(self.head[1].weight)
            nn.init.zeros_(self.head[1].bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"generator input sides must be multiples of 4, got {tuple(x.shape[-2:])}")
        out = self.head(self.body(x))
        if self.spec.identity_init:
            return torch.clamp(x + out, -1.0, 1.0)
        return torch.tanh(out)


class GlobalDiscriminator(nn.Module):
    """Whole-image critic: strided convs, global average pool, linear score."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        ndf = spec.ndf
        self.features = nn.Sequential(
            nn.Conv2d(1, ndf, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(ndf, ndf * 2, 4, 2, 1), nn.InstanceNorm2d(ndf * 2), nn.ReLU(),
            nn.Conv2d(ndf * 2, ndf * 4, 4, 2, 1), nn.InstanceNorm2d(ndf * 4), nn.ReLU(),
            nn.Conv2d(ndf * 4, ndf * 8, 4, 2, 1), nn.InstanceNorm2d(ndf * 8), nn.ReLU(),
        )
        self.score = nn.Linear(ndf * 8, 1)

    def forward(self, x: Tensor) -> Tensor:
        f = self.features(x).mean(dim=(2, 3))
        return self.score(f).squeeze(1)


class PatchDiscriminator(nn.Module):
    """PatchGAN critic (~70x70 receptive field with 3 downsampling blocks)."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        ndf = spec.ndf
        layers = [nn.Conv2d(1, ndf, 4, 2, 1), nn.ReLU()]
        ch = ndf
        for i in range(1, spec.patch_layers):
            out = ndf * min(2 ** i, 8)
            layers += [nn.Conv2d(ch, out, 4, 2, 1), nn.InstanceNorm2d(out), nn.ReLU()]
            ch = out
        out = ndf * min(2 ** spec.patch_layers, 8)
        layers += [nn.Conv2d(ch, out, 4, 1, 1), nn.InstanceNorm2d(out), nn.ReLU()]
        layers += [nn.Conv2d(out, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


NET_NAMES = ("G", "F", "D_A_global", "D_A_patch", "D_B_global", "D_B_patch")


def build_networks(gen: GeneratorSpec, disc: DiscriminatorSpec) -> dict[str, nn.Module]:
    """G: rolled -> latent, F: latent -> rolled, D_A judges rolled, D_B judges latent."""
    return {
        "G": ResnetGenerator(gen),
        "F": ResnetGenerator(gen),
        "D_A_global": GlobalDiscriminator(disc),
        "D_A_patch": PatchDiscriminator(disc),
        "D_B_global": GlobalDiscriminator(disc),
        "D_B_patch": PatchDiscriminator(disc),
    }
