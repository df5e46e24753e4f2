"""Waveform container, WAV file I/O, resampling, segmentation and SNR.

All audio inside the toolkit is mono float64 in [-1, 1]. On disk the
canonical format is RIFF/WAVE with 16-bit integer PCM; multichannel files
are averaged to mono at load time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

PCM16_SCALE = 32768.0


class WavHeaderError(ValueError):
    """The file is not a parseable RIFF/WAVE container."""


class UnsupportedEncodingError(ValueError):
    """The file parses as WAVE but is not 16-bit integer PCM."""


class ManifestError(ValueError):
    """The manifest file violates the one-JSON-object-per-line contract."""


@dataclass
class Waveform:
    """Mono audio signal: samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int
    utterance_id: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def replace_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate, self.utterance_id)


@dataclass
class Segment:
    """A fixed-length chunk of a waveform, zero-padded past ``valid_len``."""

    waveform: Waveform
    valid_len: int


@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: Path
    text: str | None = None


@dataclass
class Manifest:
    """Utterance inventory: unique ids, speaker labels, file paths."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({u for u in ids if ids.count(u) > 1})
            raise ManifestError(f"duplicate utterance ids: {dupes}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self, utterance_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.utterance_id == utterance_id:
                return e
        raise KeyError(utterance_id)

    def speakers(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out


def load_manifest(path) -> Manifest:
    """Read a JSON-lines manifest. Relative paths resolve against the file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from e
        try:
            wav_path = Path(obj["path"])
            entries.append(
                ManifestEntry(
                    utterance_id=str(obj["utterance_id"]),
                    speaker_id=str(obj["speaker_id"]),
                    path=wav_path if wav_path.is_absolute() else base / wav_path,
                    text=obj.get("text"),
                )
            )
        except KeyError as e:
            raise ManifestError(f"{path}:{lineno}: missing key {e}") from e
    return Manifest(entries)


def save_manifest(manifest: Manifest, path, relative_to=None) -> None:
    """Write one JSON object per line. With ``relative_to``, paths under
    that directory are stored relative, keeping the manifest relocatable."""
    path = Path(path)
    with path.open("w") as f:
        for e in manifest.entries:
            p = Path(e.path)
            if relative_to is not None and p.is_relative_to(relative_to):
                p = p.relative_to(relative_to)
            obj = {
                "utterance_id": e.utterance_id,
                "speaker_id": e.speaker_id,
                "path": str(p),
            }
            if e.text is not None:
                obj["text"] = e.text
            f.write(json.dumps(obj) + "\n")


def load_wav(path, utterance_id: str | None = None) -> Waveform:
    """Load a 16-bit PCM WAV file as a mono waveform in [-1, 1].

    Multichannel input is averaged across channels. Integer samples are
    scaled by 1/32768, so -32768 maps to -1.0 and 16384 to 0.5. Any other
    sample encoding (float, 8/24/32-bit) is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise WavHeaderError(f"not a readable RIFF/WAVE file: {path} ({e})") from e
    if data.dtype != np.int16:
        raise UnsupportedEncodingError(
            f"expected 16-bit integer PCM, got dtype {data.dtype}: {path}"
        )
    samples = data.astype(np.float64) / PCM16_SCALE
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise WavHeaderError(f"WAV file contains no samples: {path}")
    return Waveform(samples, int(rate), utterance_id or path.stem)


def save_wav(w: Waveform, path) -> int:
    """Write a waveform as mono PCM16. Returns the number of clamped samples.

    Samples outside [-1, 1] are clamped before quantization; the count of
    clamped samples is returned so callers can surface saturation.
    """
    path = Path(path)
    samples = w.samples
    clamped = int(np.count_nonzero((samples < -1.0) | (samples > 1.0)))
    samples = np.clip(samples, -1.0, 1.0)
    # round-to-nearest onto the PCM16 lattice, saturating at +32767
    ints = np.clip(np.rint(samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, w.sample_rate, ints)
    return clamped


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Identity (same object content) when the rates already match. Output
    length is round(N * target_rate / source_rate).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate, w.utterance_id)
    g = math.gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = scipy.signal.resample_poly(w.samples, up, down)
    target_len = int(math.floor(len(w) * target_rate / w.sample_rate + 0.5))
    if len(out) > target_len:
        out = out[:target_len]
    elif len(out) < target_len:
        out = np.pad(out, (0, target_len - len(out)))
    return Waveform(np.clip(out, -1.0, 1.0), target_rate, w.utterance_id)


def segment(w: Waveform, seg_len: int) -> list[Segment]:
    """Split into non-overlapping chunks of ``seg_len`` samples.

    The final chunk is zero-padded to ``seg_len``; its valid length is kept
    on the Segment so reassembly can trim the padding exactly.
    """
    if seg_len <= 0:
        raise ValueError(f"seg_len must be positive, got {seg_len}")
    out = []
    n = len(w)
    for start in range(0, n, seg_len):
        chunk = w.samples[start : start + seg_len]
        valid = chunk.size
        if valid < seg_len:
            chunk = np.pad(chunk, (0, seg_len - valid))
        out.append(Segment(Waveform(chunk, w.sample_rate, w.utterance_id), valid))
    return out


def reassemble(segments: list[Segment]) -> Waveform:
    """Concatenate segments, trimming each to its valid length."""
    if not segments:
        raise ValueError("cannot reassemble an empty segment list")
    parts = [s.waveform.samples[: s.valid_len] for s in segments]
    first = segments[0].waveform
    return Waveform(np.concatenate(parts), first.sample_rate, first.utterance_id)


def compute_snr(reference: Waveform, test: Waveform) -> float:
    """Signal-to-noise ratio 10*log10(sum(ref^2) / sum((ref-test)^2)) in dB.

    Returns +inf when the residual energy is exactly zero (test == ref).
    """
    if len(reference) != len(test):
        raise ValueError(
            f"length mismatch: reference {len(reference)} vs test {len(test)}"
        )
    if reference.sample_rate != test.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {reference.sample_rate} vs {test.sample_rate}"
        )
    ref_energy = float(np.sum(reference.samples**2))
    if ref_energy == 0.0:
        raise ValueError("reference has zero energy; SNR undefined")
    residual = float(np.sum((reference.samples - test.samples) ** 2))
    if residual == 0.0:
        return math.inf
    return 10.0 * math.log10(ref_energy / residual)
