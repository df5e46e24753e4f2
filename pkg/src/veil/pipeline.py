"""Utterance-level operations tying the modules into a pipeline.

Protect, restore and purify map manifests to new manifests of processed
audio; evaluate scores a (reference, test) manifest pair into one report.
Per-utterance work fans out across a thread pool and results are merged in
utterance-id order, so the artifacts are identical for any worker count.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import audio, metrics, speaker
from .audio import Manifest, ManifestEntry, Waveform, load_wav, save_manifest, save_wav
from .metrics import UtteranceMetrics, align_tokens, tokenize
from .purify import PurifyConfig, purify
from .speaker import Trial, TrainedExtractor, cosine_score
from .training import Checkpoint


def cache_dir() -> Path:
    """Directory for intermediate artifacts, from VEIL_CACHE_DIR if set."""
    root = os.environ.get("VEIL_CACHE_DIR")
    path = Path(root) if root else Path(tempfile.gettempdir()) / "veil-cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _utterance_seed(seed: int, utterance_id: str) -> int:
    """Stable per-utterance seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{seed}:{utterance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _map_utterances(manifest: Manifest, fn, jobs: int) -> list:
    entries = sorted(manifest, key=lambda e: e.utterance_id)
    if jobs <= 1:
        return [fn(e) for e in entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, entries))


@dataclass
class ProcessedUtterance:
    entry: ManifestEntry
    snr_db: float | None
    clamped: int
    resampled_from: int | None = None


def _run_segments(w: Waveform, seg_len: int, apply_batch) -> tuple[Waveform, int]:
    segs = audio.segment(w, seg_len)
    batch = torch.from_numpy(np.stack([s.waveform.samples for s in segs]))
    out, clamped = apply_batch(batch)
    rebuilt = [
        audio.Segment(Waveform(out[i].numpy(), w.sample_rate, w.utterance_id), s.valid_len)
        for i, s in enumerate(segs)
    ]
    return audio.reassemble(rebuilt), clamped


def protect_waveform(
    w: Waveform, checkpoint: Checkpoint, generator=None
) -> tuple[Waveform, int]:
    """Add the generator's perturbation chunk-wise; returns (x_adv, n_clamped)."""
    generator = generator or checkpoint.build_generator()

    def apply(batch):
        with torch.no_grad():
            _, x_adv, clamped = generator.generate(batch, checkpoint.epsilon)
        return x_adv, clamped

    return _run_segments(w, checkpoint.net.seg_len, apply)


def restore_waveform(
    w_adv: Waveform, checkpoint: Checkpoint, removal=None
) -> tuple[Waveform, int]:
    """Predict and apply the reverse perturbation chunk-wise."""
    removal = removal or checkpoint.build_removal()

    def apply(batch):
        with torch.no_grad():
            return removal.restore(batch, checkpoint.epsilon)

    return _run_segments(w_adv, checkpoint.net.seg_len, apply)


def _process_manifest(
    manifest: Manifest,
    out_dir,
    jobs: int,
    process,
    expected_rate: int | None = None,
) -> tuple[Manifest, list[ProcessedUtterance]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def handle(entry: ManifestEntry) -> ProcessedUtterance:
        w = load_wav(entry.path, entry.utterance_id)
        resampled_from = None
        if expected_rate is not None and w.sample_rate != expected_rate:
            resampled_from = w.sample_rate
            w = audio.resample(w, expected_rate)
        original = w
        out, clamped = process(w)
        out_path = out_dir / f"{entry.utterance_id}.wav"
        save_wav(out, out_path)
        snr = None
        if len(out) == len(original):
            snr = audio.compute_snr(original, out)
        new_entry = ManifestEntry(entry.utterance_id, entry.speaker_id, out_path, entry.text)
        return ProcessedUtterance(new_entry, snr, clamped, resampled_from)

    results = _map_utterances(manifest, handle, jobs)
    new_manifest = Manifest([r.entry for r in results])
    save_manifest(new_manifest, out_dir / "manifest.jsonl", relative_to=out_dir)
    return new_manifest, results


def protect_manifest(
    manifest: Manifest, checkpoint: Checkpoint, out_dir, jobs: int = 1
) -> tuple[Manifest, list[ProcessedUtterance]]:
    """Protect every utterance; inputs are resampled to 16 kHz if needed."""
    generator = checkpoint.build_generator()
    return _process_manifest(
        manifest,
        out_dir,
        jobs,
        lambda w: protect_waveform(w, checkpoint, generator),
        expected_rate=16000,
    )


def restore_manifest(
    manifest: Manifest, checkpoint: Checkpoint, out_dir, jobs: int = 1
) -> tuple[Manifest, list[ProcessedUtterance]]:
    """Restore every utterance of a protected manifest."""
    removal = checkpoint.build_removal()
    return _process_manifest(
        manifest,
        out_dir,
        jobs,
        lambda w: restore_waveform(w, checkpoint, removal),
        expected_rate=16000,
    )


def purify_manifest(
    manifest: Manifest, config: PurifyConfig, out_dir, seed: int = 0, jobs: int = 1
) -> tuple[Manifest, list[ProcessedUtterance]]:
    """Apply a purification method; noise seeds derive from utterance ids."""

    def process(w: Waveform) -> tuple[Waveform, int]:
        return purify(w, config, seed=_utterance_seed(seed, w.utterance_id or "")), 0

    return _process_manifest(manifest, out_dir, jobs, process)


class EmbeddingCache:
    def __init__(self, manifest: Manifest, backend, jobs: int = 1):
        self._manifest = manifest
        self._backend = backend
        self._jobs = jobs
        self._cache: dict[str, np.ndarray] = {}

    def load(self, utterance_ids) -> None:
        todo = sorted(set(utterance_ids) - set(self._cache))

        def embed(utt: str):
            return utt, self._backend(load_wav(self._manifest.by_id(utt).path, utt))

        if self._jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self._jobs) as pool:
                results = list(pool.map(embed, todo))
        else:
            results = [embed(u) for u in todo]
        self._cache.update(dict(results))

    def __getitem__(self, utt: str) -> np.ndarray:
        return self._cache[utt]


def score_trials(
    trials: list[Trial],
    enroll_manifest: Manifest,
    test_manifest: Manifest,
    backend,
    jobs: int = 1,
) -> list[tuple[Trial, float]]:
    """Cosine-score trials; enrollment and test sides may differ in manifest."""
    enroll = EmbeddingCache(enroll_manifest, backend, jobs)
    test = EmbeddingCache(test_manifest, backend, jobs)
    enroll.load(t.enroll_utt for t in trials)
    test.load(t.test_utt for t in trials)
    return [(t, cosine_score(enroll[t.enroll_utt], test[t.test_utt])) for t in trials]


def backend_from_extractor(extractor: TrainedExtractor):
    """Adapt a trained extractor to the waveform -> vector interface."""

    def backend(w: Waveform) -> np.ndarray:
        if w.sample_rate != extractor.sample_rate:
            w = audio.resample(w, extractor.sample_rate)
        return extractor(w)

    return backend


def evaluate_condition(
    condition: str,
    ref_manifest: Manifest,
    test_manifest: Manifest,
    backend,
    trials: list[Trial] | None = None,
    asr_backend=None,
    quality_backend=None,
    jobs: int = 1,
) -> tuple[metrics.EvaluationReport, list[tuple[Trial, float]]]:
    """Score one enrollment-test condition into a report.

    EER comes from the trials (enrollment embeddings from the reference
    manifest, test embeddings from the test manifest). Signal metrics are
    computed per utterance of the test manifest against the same-id
    reference utterance. WER requires an ASR backend plus reference texts;
    quality requires a quality backend; both stay absent otherwise.
    """
    scored = []
    eer = None
    if trials:
        scored = score_trials(trials, ref_manifest, test_manifest, backend, jobs)
        eer = speaker.eer_percent([(s, t.is_target) for t, s in scored])

    def measure(entry: ManifestEntry) -> UtteranceMetrics:
        ref = load_wav(ref_manifest.by_id(entry.utterance_id).path, entry.utterance_id)
        test = load_wav(entry.path, entry.utterance_id)
        snr = audio.compute_snr(ref, test)
        corr = metrics.pitch_correlation(metrics.extract_pitch(ref), metrics.extract_pitch(test))
        quality = metrics.quality_score(ref, test, quality_backend)
        edits = None
        ref_text = ref_manifest.by_id(entry.utterance_id).text
        if asr_backend is not None and ref_text is not None:
            hyp = asr_backend(entry.path)
            edits = align_tokens(tokenize(ref_text), tokenize(hyp))
        return UtteranceMetrics(entry.utterance_id, snr, corr, quality, edits)

    per_utt = _map_utterances(test_manifest, measure, jobs)
    return metrics.assemble_report(condition, per_utt, eer_percent=eer), scored
