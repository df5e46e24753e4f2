"""Content, prosody and quality metrics plus the consolidated report.

Pitch is tracked with a normalized-autocorrelation detector (25 ms frames,
10 ms hop, 60-400 Hz band) sufficient for contour-correlation statistics.
Word error rate comes from a Levenshtein alignment with unit costs.
Perceptual quality and ASR are pluggable backends; nothing is fabricated
when a backend is not configured.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass

import numpy as np

from .audio import Waveform

F_MIN = 60.0
F_MAX = 400.0
WINDOW_S = 0.025
HOP_S = 0.010
VOICING_THRESHOLD = 0.45
# peaks within this margin of the best one count as equally strong; the
# shortest such lag wins, which suppresses octave-down errors
PEAK_MARGIN = 0.02

PITCH_CONVENTION = "pearson-over-jointly-voiced-frames"

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "condition": {"type": "string"},
        "eer_percent": {"type": ["number", "null"]},
        "snr_db": {"type": ["number", "string"]},
        "quality_score": {"type": ["number", "null"]},
        "wer_percent": {"type": ["number", "null"]},
        "pitch_corr_mean": {"type": ["number", "null"]},
        "pitch_corr_std": {"type": ["number", "null"]},
        "n_utterances": {"type": "integer", "minimum": 1},
        "excluded_pitch_count": {"type": "integer", "minimum": 0},
        "pitch_convention": {"type": "string"},
    },
    "required": [
        "condition",
        "snr_db",
        "pitch_corr_mean",
        "pitch_corr_std",
        "n_utterances",
        "excluded_pitch_count",
    ],
}


@dataclass
class PitchContour:
    """Per-frame fundamental frequency; 0 marks unvoiced frames."""

    frame_hz: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frame_hz = np.asarray(self.frame_hz, dtype=np.float64)


def _frame_autocorr(frame: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """Normalized cross-correlation of a frame with itself at each lag.

    rho(tau) = sum(x[t] x[t+tau]) / sqrt(sum_head(x^2) * sum_tail(x^2)),
    bounded in [-1, 1] and ~1 at the true period of a periodic signal.
    """
    n = frame.size
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(frame, nfft)
    corr = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    cs = np.concatenate([[0.0], np.cumsum(frame**2)])
    lags = np.arange(lag_min, lag_max + 1)
    head = cs[n - lags]            # energy of x[0 : n-tau]
    tail = cs[n] - cs[lags]        # energy of x[tau : n]
    denom = np.sqrt(head * tail)
    rho = np.zeros_like(denom)
    ok = denom > 0
    rho[ok] = corr[lags[ok]] / denom[ok]
    return rho


def extract_pitch(
    w: Waveform,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
    voicing_threshold: float = VOICING_THRESHOLD,
) -> PitchContour:
    """Track f0 per 25 ms frame at a 10 ms hop.

    Frames whose peak normalized autocorrelation in the search band falls
    below the voicing threshold (or that carry no energy) emit 0. Voiced
    estimates are refined by parabolic interpolation around the peak lag
    and clipped into [f_min, f_max].
    """
    sr = w.sample_rate
    win = int(round(WINDOW_S * sr))
    hop = int(round(HOP_S * sr))
    if len(w) < win:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one frame ({win})")
    lag_min = max(1, int(math.floor(sr / f_max)))
    lag_max = min(win - 1, int(math.ceil(sr / f_min)))
    if lag_max <= lag_min:
        raise ValueError("search band empty for this sample rate")

    f0 = []
    for start in range(0, len(w) - win + 1, hop):
        frame = w.samples[start : start + win]
        frame = frame - frame.mean()
        if not np.any(frame):
            f0.append(0.0)
            continue
        rho = _frame_autocorr(frame, lag_min, lag_max)
        best = float(rho.max())
        if best < voicing_threshold:
            f0.append(0.0)
            continue
        # shortest lag whose local maximum is within the margin of the best
        strong = rho >= best - PEAK_MARGIN
        interior = np.zeros_like(strong)
        interior[1:-1] = (rho[1:-1] >= rho[:-2]) & (rho[1:-1] >= rho[2:])
        candidates = np.nonzero(strong & interior)[0]
        i = int(candidates[0]) if candidates.size else int(np.argmax(rho))
        lag = float(lag_min + i)
        if 0 < i < rho.size - 1:
            denom = rho[i - 1] - 2.0 * rho[i] + rho[i + 1]
            if denom < 0:
                lag += 0.5 * (rho[i - 1] - rho[i + 1]) / denom
        f0.append(float(np.clip(sr / lag, f_min, f_max)))
    return PitchContour(np.asarray(f0), frame_rate=sr / hop)


def pitch_correlation(ref: PitchContour, test: PitchContour) -> float | None:
    """Pearson correlation over frames voiced in both contours.

    Identical contours score 1.0. Returns None when fewer than two frames
    are jointly voiced or when either side has zero variance there.
    """
    a, b = ref.frame_hz, test.frame_hz
    n = max(a.size, b.size)
    a = np.pad(a, (0, n - a.size))
    b = np.pad(b, (0, n - b.size))
    if np.array_equal(a, b) and np.count_nonzero(a) >= 2:
        return 1.0
    joint = (a > 0) & (b > 0)
    if np.count_nonzero(joint) < 2:
        return None
    x, y = a[joint], b[joint]
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx**2)), np.sqrt(np.sum(dy**2))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.sum(dx * dy) / (sx * sy))


def pitch_stats(corrs: list[float]) -> tuple[float, float]:
    """Population mean and standard deviation of correlation values."""
    if not corrs:
        raise ValueError("no pitch correlations to aggregate")
    arr = np.asarray(corrs, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    table = str.maketrans("", "", string.punctuation)
    return text.lower().translate(table).split()


@dataclass
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align_tokens(reference: list[str], hypothesis: list[str]) -> EditCounts:
    """Levenshtein alignment with unit costs; ties resolve to substitutions."""
    nr, nh = len(reference), len(hypothesis)
    dist = np.zeros((nr + 1, nh + 1), dtype=np.int64)
    dist[:, 0] = np.arange(nr + 1)
    dist[0, :] = np.arange(nh + 1)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            sub = dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    s = d = ins = 0
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
            reference[i - 1] != hypothesis[j - 1]
        ):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), int(d), int(ins), nr)


def word_error_rate(reference: list[str], hypothesis: list[str]) -> float:
    """100 * (S + D + I) / N over a Levenshtein alignment."""
    if not reference:
        raise ValueError("reference token sequence must be nonempty")
    counts = align_tokens(list(reference), list(hypothesis))
    return 100.0 * counts.errors / counts.n_ref


def quality_score(ref: Waveform, test: Waveform, backend) -> float | None:
    """Delegate to a quality backend ``(ref, test) -> float``; None if absent.

    Backend failures propagate verbatim; the score is never fabricated.
    """
    if backend is None:
        return None
    if ref.sample_rate != test.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {ref.sample_rate} vs {test.sample_rate}"
        )
    return float(backend(ref, test))


@dataclass
class UtteranceMetrics:
    """Per-utterance measurements feeding the aggregate report."""

    utterance_id: str
    snr_db: float
    pitch_corr: float | None = None
    quality: float | None = None
    edits: EditCounts | None = None


@dataclass
class EvaluationReport:
    condition: str
    snr_db: float
    pitch_corr_mean: float | None
    pitch_corr_std: float | None
    n_utterances: int
    excluded_pitch_count: int
    eer_percent: float | None = None
    quality_score: float | None = None
    wer_percent: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "condition": self.condition,
            "eer_percent": self.eer_percent,
            "snr_db": "inf" if math.isinf(self.snr_db) else self.snr_db,
            "quality_score": self.quality_score,
            "wer_percent": self.wer_percent,
            "pitch_corr_mean": self.pitch_corr_mean,
            "pitch_corr_std": self.pitch_corr_std,
            "n_utterances": self.n_utterances,
            "excluded_pitch_count": self.excluded_pitch_count,
            "pitch_convention": PITCH_CONVENTION,
        }


def assemble_report(
    condition: str,
    per_utterance: list[UtteranceMetrics],
    eer_percent: float | None = None,
) -> EvaluationReport:
    """Aggregate per-utterance metrics into one report.

    SNR and quality are averaged over utterances; WER pools edit counts over
    the whole set; pitch statistics exclude no-value utterances and record
    how many were excluded.
    """
    if not per_utterance:
        raise ValueError("no utterances to report on")
    snrs = [m.snr_db for m in per_utterance]
    snr_mean = math.inf if any(math.isinf(s) for s in snrs) else float(np.mean(snrs))

    corrs = [m.pitch_corr for m in per_utterance if m.pitch_corr is not None]
    excluded = len(per_utterance) - len(corrs)
    if corrs:
        p_mean, p_std = pitch_stats(corrs)
    else:
        p_mean = p_std = None

    qualities = [m.quality for m in per_utterance if m.quality is not None]
    q = float(np.mean(qualities)) if qualities else None

    edit_sets = [m.edits for m in per_utterance if m.edits is not None]
    if edit_sets:
        n_ref = sum(e.n_ref for e in edit_sets)
        if n_ref == 0:
            raise ValueError("WER undefined: empty pooled reference")
        wer = 100.0 * sum(e.errors for e in edit_sets) / n_ref
    else:
        wer = None

    return EvaluationReport(
        condition=condition,
        snr_db=snr_mean,
        pitch_corr_mean=p_mean,
        pitch_corr_std=p_std,
        n_utterances=len(per_utterance),
        excluded_pitch_count=excluded,
        eer_percent=eer_percent,
        quality_score=q,
        wer_percent=wer,
    )
