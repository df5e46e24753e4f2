"""Synthetic filtered-harmonic "speech" corpus for desk-scale runs.

Each speaker is a randomized voice model: a base pitch, two resonant
filters standing in for formants, and a spectral tilt. Utterances vary in
pitch drift, vibrato phase, syllabic amplitude modulation and noise floor,
so in-speaker variety exists but speakers stay easily separable for a
small classifier. Useful for smoke training and the acceptance pipeline;
not a substitute for real speech.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import Manifest, ManifestEntry, Waveform, save_manifest, save_wav

_VOCAB = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu"
).split()


@dataclass(frozen=True)
class ToyCorpusConfig:
    # 16384 samples at 16 kHz: one exact 2^14 generator segment per utterance
    n_speakers: int = 4
    utterances_per_speaker: int = 25
    duration_s: float = 1.024
    sample_rate: int = 16000
    seed: int = 0


@dataclass(frozen=True)
class _Voice:
    f0_base: float
    formants: tuple
    bandwidths: tuple
    tilt: float


def _voice(config: ToyCorpusConfig, index: int) -> _Voice:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, index]))
    f0 = 105.0 * (1.31**index) * (1.0 + 0.05 * rng.uniform(-1, 1))
    f1 = 380.0 + 170.0 * index + rng.uniform(-40, 40)
    f2 = 1150.0 + 420.0 * index + rng.uniform(-90, 90)
    return _Voice(
        f0_base=float(f0),
        formants=(float(f1), float(f2)),
        bandwidths=(90.0 + 10.0 * index, 130.0 + 12.0 * index),
        tilt=float(-0.8 - 0.1 * index),
    )


def _resonator(freq: float, bandwidth: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bandwidth / sr)
    omega = 2.0 * np.pi * freq / sr
    b = np.array([1.0 - r])
    a = np.array([1.0, -2.0 * r * np.cos(omega), r * r])
    return b, a


def _synth_utterance(config: ToyCorpusConfig, voice: _Voice, rng) -> np.ndarray:
    sr = config.sample_rate
    n = int(round(config.duration_s * sr))
    t = np.arange(n) / sr

    drift = 0.03 * np.sin(2 * np.pi * rng.uniform(0.4, 1.2) * t + rng.uniform(0, 2 * np.pi))
    vibrato = 0.015 * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t + rng.uniform(0, 2 * np.pi))
    f0 = voice.f0_base * (1.0 + drift + vibrato) * (1.0 + 0.03 * rng.uniform(-1, 1))
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    n_harmonics = min(30, int(0.45 * sr / float(f0.max())))
    source = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        source += (k**voice.tilt) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    out = source
    for freq, bw in zip(voice.formants, voice.bandwidths):
        b, a = _resonator(freq, bw, sr)
        out = scipy.signal.lfilter(b, a, out)

    syllable_rate = rng.uniform(2.5, 4.0)
    envelope = 0.35 + 0.65 * (
        0.5 - 0.5 * np.cos(2 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi))
    )
    fade = min(n // 20, 400)
    ramp = np.ones(n)
    ramp[:fade] = np.linspace(0.0, 1.0, fade)
    ramp[-fade:] = np.linspace(1.0, 0.0, fade)
    out = out * envelope * ramp

    out = 0.45 * out / np.max(np.abs(out))
    # keep the noise floor just above PCM16 dither so the spectrum's quiet
    # cells stay quiet: that is where adversarial energy is most effective
    out += 3e-5 * rng.standard_normal(n)
    return np.clip(out, -1.0, 1.0)


def build_toy_corpus(out_dir, config: ToyCorpusConfig | None = None) -> Manifest:
    """Synthesize the corpus into ``out_dir`` and write its manifest."""
    config = config or ToyCorpusConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(config.n_speakers):
        voice = _voice(config, i)
        for j in range(config.utterances_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, i, j]))
            samples = _synth_utterance(config, voice, rng)
            utt = f"spk{i}_utt{j:02d}"
            path = out_dir / f"{utt}.wav"
            save_wav(Waveform(samples, config.sample_rate, utt), path)
            text = " ".join(rng.choice(_VOCAB, size=5, replace=True))
            entries.append(ManifestEntry(utt, f"spk{i}", path, text))
    manifest = Manifest(entries)
    save_manifest(manifest, out_dir / "manifest.jsonl", relative_to=out_dir)
    return manifest


def split_manifest(
    manifest: Manifest, heldout_per_speaker: int, seed: int = 0
) -> tuple[Manifest, Manifest]:
    """Deterministically split off ``heldout_per_speaker`` utterances each."""
    rng = np.random.default_rng(seed)
    train, heldout = [], []
    for spk in sorted(manifest.speakers()):
        entries = sorted(manifest.speakers()[spk], key=lambda e: e.utterance_id)
        if heldout_per_speaker >= len(entries):
            raise ValueError(
                f"cannot hold out {heldout_per_speaker} of {len(entries)} "
                f"utterances for speaker {spk!r}"
            )
        picked = set(
            int(i) for i in rng.choice(len(entries), size=heldout_per_speaker, replace=False)
        )
        for i, e in enumerate(entries):
            (heldout if i in picked else train).append(e)
    return Manifest(train), Manifest(heldout)
