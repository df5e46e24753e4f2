"""Perturbation-unaware purification baselines.

Three classical defenses that attenuate adversarial perturbations without
any knowledge of how they were generated: additive white Gaussian noise at
a target SNR, amplitude quantization, and median smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform

METHODS = ("add_noise", "quantize", "median_smooth")


@dataclass(frozen=True)
class PurifyConfig:
    method: str = "add_noise"
    snr_db: float = 25.0
    quant_factor: int = 256
    kernel: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.quant_factor < 2:
            raise ValueError(f"quant_factor must be >= 2, got {self.quant_factor}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")


def purify_add_noise(x: Waveform, snr_db: float = 25.0, seed: int = 0) -> Waveform:
    """Add zero-mean white Gaussian noise scaled to hit ``snr_db`` exactly.

    The scale is chosen so 10*log10(sum(x^2)/sum(noise^2)) equals the target
    before the final [-1, 1] clamp. Deterministic given the seed.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    energy = float(np.sum(x.samples**2))
    if energy == 0.0:
        raise ValueError("cannot scale noise against a zero-energy signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(x))
    noise *= np.sqrt(energy / (10.0 ** (snr_db / 10.0) * np.sum(noise**2)))
    return x.replace_samples(np.clip(x.samples + noise, -1.0, 1.0))


def purify_quantize(x: Waveform, factor: int = 256) -> Waveform:
    """Snap each sample to the nearest multiple of 1/factor."""
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    return x.replace_samples(np.clip(np.rint(x.samples * factor) / factor, -1.0, 1.0))


def purify_median(x: Waveform, kernel: int = 3) -> Waveform:
    """Sliding-window median with edge-replication padding.

    Output length equals input length; kernel 1 is the identity.
    """
    if kernel % 2 == 0:
        raise ValueError(f"kernel must be odd, got {kernel}")
    if kernel < 1:
        raise ValueError(f"kernel must be positive, got {kernel}")
    if kernel > len(x):
        raise ValueError(f"kernel {kernel} longer than signal of {len(x)} samples")
    if kernel == 1:
        return x.replace_samples(x.samples.copy())
    half = kernel // 2
    padded = np.pad(x.samples, (half, half), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return x.replace_samples(np.median(windows, axis=-1))


def purify(x: Waveform, config: PurifyConfig, seed: int = 0) -> Waveform:
    """Dispatch on the configured method."""
    if config.method == "add_noise":
        return purify_add_noise(x, config.snr_db, seed)
    if config.method == "quantize":
        return purify_quantize(x, config.quant_factor)
    return purify_median(x, config.kernel)
