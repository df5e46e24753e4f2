"""Speaker embedding backend, verification trial protocol and EER.

The built-in extractor is a small conv net with mean+std statistics pooling
trained as a speaker classifier on a labeled manifest; its penultimate
linear layer is the embedding. Any external backend can replace it through
the one-function interface used by the pipeline: waveform -> vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import audio
from .audio import Manifest, Waveform, load_wav
from .checkpoint import load_container, save_container


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    source_utterance: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding must be finite")


@dataclass(frozen=True)
class Trial:
    enroll_utt: str
    test_utt: str
    is_target: bool


@dataclass(frozen=True)
class ExtractorNetConfig:
    """Log-mel front end plus a 3-layer conv encoder over frames.

    The log compression mirrors production speaker encoders: quiet
    time-frequency cells get large feature gradients, which is what makes
    such models respond to small, well-aimed waveform perturbations.
    """

    sample_rate: int = 16000
    embed_dim: int = 64
    n_mels: int = 40
    win_len: int = 400
    hop_len: int = 160
    mel_floor: float = 1e-7
    preemphasis: float = 0.97
    channels: tuple = (32, 48, 64)
    kernels: tuple = (5, 3, 3)
    negative_slope: float = 0.2

    @property
    def min_input_len(self) -> int:
        # one analysis frame
        return self.win_len

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "embed_dim": self.embed_dim,
            "n_mels": self.n_mels,
            "win_len": self.win_len,
            "hop_len": self.hop_len,
            "mel_floor": self.mel_floor,
            "preemphasis": self.preemphasis,
            "channels": list(self.channels),
            "kernels": list(self.kernels),
            "negative_slope": self.negative_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorNetConfig":
        return cls(
            sample_rate=int(d["sample_rate"]),
            embed_dim=int(d["embed_dim"]),
            n_mels=int(d["n_mels"]),
            win_len=int(d["win_len"]),
            hop_len=int(d["hop_len"]),
            mel_floor=float(d["mel_floor"]),
            preemphasis=float(d["preemphasis"]),
            channels=tuple(int(c) for c in d["channels"]),
            kernels=tuple(int(k) for k in d["kernels"]),
            negative_slope=float(d["negative_slope"]),
        )


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters as an (n_mels, n_fft//2 + 1) matrix."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


class SpeakerEncoder(nn.Module):
    """Log-mel features, conv stack, mean+std pooling, linear embedding.

    The classifier head is only exercised during training; embeddings come
    from :meth:`embed`, which is differentiable w.r.t. the input samples.
    """

    def __init__(self, cfg: ExtractorNetConfig, n_speakers: int):
        super().__init__()
        self.cfg = cfg
        self.n_speakers = n_speakers
        self.register_buffer(
            "window", torch.from_numpy(np.hanning(cfg.win_len).astype(np.float64))
        )
        self.register_buffer(
            "mel", torch.from_numpy(mel_filterbank(cfg.n_mels, cfg.win_len, cfg.sample_rate))
        )
        layers = []
        in_ch = cfg.n_mels
        for out_ch, k in zip(cfg.channels, cfg.kernels):
            layers.append(nn.Conv1d(in_ch, out_ch, k, padding=k // 2))
            layers.append(nn.LeakyReLU(cfg.negative_slope))
            in_ch = out_ch
        self.encoder = nn.Sequential(*layers)
        self.embedding = nn.Linear(2 * cfg.channels[-1], cfg.embed_dim)
        self.classifier = nn.Linear(cfg.embed_dim, n_speakers)
        self.double()

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Log-mel spectrogram: (batch, n_samples) -> (batch, n_mels, frames)."""
        x = torch.atleast_2d(torch.as_tensor(x, dtype=torch.float64))
        if x.shape[-1] < self.cfg.min_input_len:
            raise ValueError(
                f"input of {x.shape[-1]} samples is shorter than one analysis "
                f"frame ({self.cfg.min_input_len} samples)"
            )
        if self.cfg.preemphasis:
            x = torch.cat([x[:, :1], x[:, 1:] - self.cfg.preemphasis * x[:, :-1]], dim=1)
        frames = x.unfold(-1, self.cfg.win_len, self.cfg.hop_len) * self.window
        power = torch.fft.rfft(frames, dim=-1).abs() ** 2
        mel = torch.einsum("mf,btf->bmt", self.mel, power)
        return torch.log(mel + self.cfg.mel_floor)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Map (batch, n_samples) to (batch, embed_dim)."""
        h = self.encoder(self.features(x))
        mean = h.mean(dim=-1)
        std = torch.sqrt(h.var(dim=-1, unbiased=False) + 1e-8)
        return self.embedding(torch.cat([mean, std], dim=-1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))


@dataclass
class ExtractorTrainConfig:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    window_len: int = 16000
    seed: int = 0
    net: ExtractorNetConfig = field(default_factory=ExtractorNetConfig)


class TrainedExtractor:
    """A speaker encoder plus its label map; callable waveform -> vector."""

    def __init__(self, model: SpeakerEncoder, label_map: list[str], train_accuracy: float,
                 seed: int):
        self.model = model
        self.label_map = label_map
        self.train_accuracy = train_accuracy
        self.seed = seed
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def sample_rate(self) -> int:
        return self.model.cfg.sample_rate

    def __call__(self, w: Waveform) -> np.ndarray:
        return extract_embedding(w, self).vector

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable embedding of (batch, n_samples) segments."""
        return self.model.embed(x)

    def save(self, path) -> None:
        meta = {
            "kind": "speaker_extractor",
            "net": self.model.cfg.to_dict(),
            "label_map": self.label_map,
            "train_accuracy": self.train_accuracy,
            "seed": self.seed,
        }
        tensors = {k: v.detach().numpy() for k, v in self.model.state_dict().items()}
        save_container(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "TrainedExtractor":
        meta, tensors = load_container(path)
        if meta.get("kind") != "speaker_extractor":
            raise ValueError(f"not a speaker extractor checkpoint: {path}")
        cfg = ExtractorNetConfig.from_dict(meta["net"])
        model = SpeakerEncoder(cfg, n_speakers=len(meta["label_map"]))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return cls(model, list(meta["label_map"]), float(meta["train_accuracy"]),
                   int(meta["seed"]))


def extract_embedding(w: Waveform, extractor: TrainedExtractor) -> SpeakerEmbedding:
    """Embed a whole utterance. The waveform must match the extractor rate."""
    if w.sample_rate != extractor.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} != extractor rate {extractor.sample_rate}"
        )
    with torch.no_grad():
        vec = extractor.model.embed(torch.from_numpy(w.samples)).squeeze(0).numpy()
    return SpeakerEmbedding(vec, w.utterance_id or "")


def _fixed_window(samples: np.ndarray, window_len: int, start: int) -> np.ndarray:
    if samples.size >= window_len:
        return samples[start : start + window_len]
    return np.pad(samples, (0, window_len - samples.size))


def train_toy_extractor(
    manifest: Manifest, config: ExtractorTrainConfig | None = None
) -> TrainedExtractor:
    """Train the built-in speaker classifier on a labeled manifest.

    Requires at least 2 speakers with at least 2 utterances each. Training
    is deterministic given the config seed; the final training-set
    classification accuracy is recorded on the returned extractor.
    """
    config = config or ExtractorTrainConfig()
    by_speaker = manifest.speakers()
    if len(by_speaker) < 2:
        raise ValueError(f"need >= 2 speakers, got {len(by_speaker)}")
    for spk, entries in by_speaker.items():
        if len(entries) < 2:
            raise ValueError(f"speaker {spk!r} has {len(entries)} utterance(s), need >= 2")

    label_map = sorted(by_speaker)
    label_of = {s: i for i, s in enumerate(label_map)}
    waves, labels = [], []
    for e in manifest:
        w = load_wav(e.path, e.utterance_id)
        if w.sample_rate != config.net.sample_rate:
            w = audio.resample(w, config.net.sample_rate)
        waves.append(w.samples)
        labels.append(label_of[e.speaker_id])
    labels = np.asarray(labels)

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = SpeakerEncoder(config.net, n_speakers=len(label_map))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(config.seed)

    model.train()
    for _ in range(config.steps):
        idx = rng.integers(0, len(waves), size=config.batch_size)
        batch = np.stack(
            [
                _fixed_window(
                    waves[i],
                    config.window_len,
                    int(rng.integers(0, max(1, waves[i].size - config.window_len + 1))),
                )
                for i in idx
            ]
        )
        logits = model(torch.from_numpy(batch))
        loss = ce(logits, torch.from_numpy(labels[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()

    model.eval()
    with torch.no_grad():
        correct = 0
        for samples, label in zip(waves, labels):
            center = max(0, (samples.size - config.window_len) // 2)
            x = torch.from_numpy(_fixed_window(samples, config.window_len, center))
            correct += int(model(x).argmax(dim=-1).item() == label)
    accuracy = correct / len(waves)
    return TrainedExtractor(model, label_map, accuracy, config.seed)


def cosine_score(a, b) -> float:
    """Cosine similarity of two embeddings; symmetric, scale-invariant."""
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm embedding")
    return float(np.dot(va, vb) / (na * nb))


def build_trials(
    manifest: Manifest,
    targets_per_speaker: int = 1,
    nontargets_per_speaker: int = 30,
    seed: int = 0,
) -> list[Trial]:
    """Compose verification trials: per speaker, one enrollment utterance,
    target trials against other utterances of the same speaker and nontarget
    trials against other speakers' utterances (without replacement where the
    pool allows). Deterministic given the seed.
    """
    by_speaker = manifest.speakers()
    if len(by_speaker) < 2:
        raise ValueError(f"need >= 2 speakers to build trials, got {len(by_speaker)}")
    rng = np.random.default_rng(seed)
    trials = []
    for spk in sorted(by_speaker):
        utts = sorted(e.utterance_id for e in by_speaker[spk])
        if len(utts) < 2:
            raise ValueError(f"speaker {spk!r} needs >= 2 utterances for a target trial")
        enroll = utts[int(rng.integers(0, len(utts)))]
        same = [u for u in utts if u != enroll]
        if targets_per_speaker > len(same):
            raise ValueError(
                f"speaker {spk!r}: {targets_per_speaker} target trials requested "
                f"but only {len(same)} other utterances available"
            )
        picked = rng.choice(len(same), size=targets_per_speaker, replace=False)
        for i in sorted(int(j) for j in picked):
            trials.append(Trial(enroll, same[i], True))
        others = sorted(
            e.utterance_id
            for other, entries in by_speaker.items()
            if other != spk
            for e in entries
        )
        replace = nontargets_per_speaker > len(others)
        picked = rng.choice(len(others), size=nontargets_per_speaker, replace=replace)
        for i in (int(j) for j in picked):
            trials.append(Trial(enroll, others[i], False))
    return trials


def compute_eer(scores) -> float:
    """Equal error rate of (score, is_target) pairs, as a fraction.

    Thresholds sweep the sorted unique scores; FAR is the fraction of
    nontargets at or above the threshold, FRR the fraction of targets below
    it. The EER is read off at the FAR/FRR crossing, linearly interpolating
    between the bracketing thresholds.
    """
    targets = np.sort(np.array([s for s, t in scores if t], dtype=np.float64))
    nontargets = np.sort(np.array([s for s, t in scores if not t], dtype=np.float64))
    if targets.size == 0 or nontargets.size == 0:
        raise ValueError("EER needs at least one target and one nontarget score")
    thresholds = np.unique(np.concatenate([targets, nontargets]))
    far = 1.0 - np.searchsorted(nontargets, thresholds, side="left") / nontargets.size
    frr = np.searchsorted(targets, thresholds, side="left") / targets.size
    # sentinel above all scores: everything rejected
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    diff = far - frr  # nonincreasing; starts at 1 (lowest threshold accepts all)
    i = int(np.argmax(diff <= 0.0))
    if diff[i] == 0.0:
        return float(far[i])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def eer_percent(scores) -> float:
    return 100.0 * compute_eer(scores)


def save_trials(trials: list[Trial], path) -> None:
    """One trial per line: ``<enroll_utt> <test_utt> target|nontarget``."""
    with Path(path).open("w") as f:
        for t in trials:
            f.write(f"{t.enroll_utt} {t.test_utt} {'target' if t.is_target else 'nontarget'}\n")


def load_trials(path) -> list[Trial]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trial list not found: {path}")
    trials = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{lineno}: malformed trial line: {line!r}")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def save_scores(scored: list[tuple[Trial, float]], path) -> None:
    """One score per line: ``<enroll_utt> <test_utt> <score>``."""
    with Path(path).open("w") as f:
        for t, s in scored:
            f.write(f"{t.enroll_utt} {t.test_utt} {s!r}\n")


def load_scores(path) -> list[tuple[str, str, float]]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: malformed score line: {line!r}")
        out.append((parts[0], parts[1], float(parts[2])))
    return out
