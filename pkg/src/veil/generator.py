"""Perturbation generator: strided-conv encoder with twin decoders.

The encoder maps a waveform segment to a latent sequence; one transposed
conv decoder emits a noise signal bounded in (-1, 1) by tanh, the other a
mask in (0, 1) by a logistic. The adversarial segment is

    x_adv = clamp(x + epsilon * (noise * mask), -1, 1)

so the pre-clamp perturbation is bounded by epsilon in max norm.

All modules run in float64: the finite-difference gradient checks and the
exact-cancellation tests need more headroom than float32 provides.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class NetConfig:
    """Shape hyperparameters shared by the generator and the removal net."""

    seg_len: int = 32000
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 8
    stride: int = 4
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.kernel != 2 * self.stride:
            raise ValueError("kernel must equal 2*stride for exact shape mirroring")
        if self.seg_len % self.stride ** len(self.channels) != 0:
            raise ValueError(
                f"seg_len {self.seg_len} must be divisible by "
                f"stride**n_layers = {self.stride ** len(self.channels)}"
            )

    @property
    def stride_product(self) -> int:
        return self.stride ** len(self.channels)

    @property
    def latent_frames(self) -> int:
        return self.seg_len // self.stride_product

    def to_dict(self) -> dict:
        return {
            "seg_len": self.seg_len,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "stride": self.stride,
            "negative_slope": self.negative_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            seg_len=int(d["seg_len"]),
            channels=tuple(int(c) for c in d["channels"]),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            negative_slope=float(d["negative_slope"]),
        )


@dataclass
class PerturbationParts:
    """Noise, mask and their product scaled by the attack intensity."""

    noise: torch.Tensor
    mask: torch.Tensor
    perturbation: torch.Tensor
    epsilon: float


def compose_adversarial(
    x: torch.Tensor, noise: torch.Tensor, mask: torch.Tensor, epsilon: float
) -> tuple[PerturbationParts, torch.Tensor, int]:
    """x_adv = clamp(x + epsilon * noise * mask); returns parts, x_adv, n_clamped."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x = torch.as_tensor(x, dtype=torch.float64)
    perturbation = epsilon * noise * mask
    raw = x + perturbation
    x_adv = torch.clamp(raw, -1.0, 1.0)
    clamp_count = int((raw != x_adv).sum())
    return PerturbationParts(noise, mask, perturbation, epsilon), x_adv, clamp_count


def _encoder(cfg: NetConfig) -> nn.Sequential:
    layers = []
    in_ch = 1
    pad = cfg.stride // 2
    for out_ch in cfg.channels:
        layers.append(nn.Conv1d(in_ch, out_ch, cfg.kernel, stride=cfg.stride, padding=pad))
        layers.append(nn.LeakyReLU(cfg.negative_slope))
        in_ch = out_ch
    return nn.Sequential(*layers)


def _decoder(cfg: NetConfig, head: nn.Module) -> nn.Sequential:
    layers = []
    chans = list(cfg.channels)
    pad = cfg.stride // 2
    ins = chans[::-1]                 # e.g. (64, 64, 32, 16)
    outs = chans[-2::-1] + [1]        # e.g. (64, 32, 16, 1)
    for i, (in_ch, out_ch) in enumerate(zip(ins, outs)):
        layers.append(
            nn.ConvTranspose1d(in_ch, out_ch, cfg.kernel, stride=cfg.stride, padding=pad)
        )
        last = i == len(ins) - 1
        layers.append(head if last else nn.LeakyReLU(cfg.negative_slope))
    return nn.Sequential(*layers)


class PerturbationGenerator(nn.Module):
    """Encoder plus noise/mask decoders producing the adversarial segment."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _encoder(cfg)
        self.noise_decoder = _decoder(cfg, nn.Tanh())
        self.mask_decoder = _decoder(cfg, nn.Sigmoid())
        self.double()

    def _check_segment(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.atleast_2d(torch.as_tensor(x, dtype=torch.float64))
        if x.shape[-1] != self.cfg.seg_len:
            raise ValueError(
                f"segment length {x.shape[-1]} != configured seg_len {self.cfg.seg_len}"
            )
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Map (batch, seg_len) samples to a (batch, channels, frames) latent."""
        x = self._check_segment(x)
        return self.encoder(x.unsqueeze(1))

    def _check_latent(self, latent: torch.Tensor) -> torch.Tensor:
        expect = (self.cfg.channels[-1], self.cfg.latent_frames)
        if tuple(latent.shape[-2:]) != expect:
            raise ValueError(f"latent shape {tuple(latent.shape[-2:])} != expected {expect}")
        return latent

    def decode_noise(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent to a (batch, seg_len) noise signal strictly inside (-1, 1)."""
        return self.noise_decoder(self._check_latent(latent)).squeeze(1)

    def decode_mask(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent to a (batch, seg_len) mask strictly inside (0, 1)."""
        return self.mask_decoder(self._check_latent(latent)).squeeze(1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._check_segment(x)
        latent = self.encoder(x.unsqueeze(1))
        return self.noise_decoder(latent).squeeze(1), self.mask_decoder(latent).squeeze(1)

    def generate(
        self, x: torch.Tensor, epsilon: float
    ) -> tuple[PerturbationParts, torch.Tensor, int]:
        """Build the adversarial segment for ``x``.

        Returns the perturbation parts (for loss computation), the clamped
        adversarial segment, and the number of samples hit by the clamp.
        """
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        x = self._check_segment(x)
        noise, mask = self.forward(x)
        return compose_adversarial(x, noise, mask, epsilon)


def new_generator(cfg: NetConfig, seed: int) -> PerturbationGenerator:
    """Build a generator with seeded uniform fan-in initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PerturbationGenerator(cfg)
