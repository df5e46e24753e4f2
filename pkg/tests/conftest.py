import numpy as np
import pytest

from veil.audio import Manifest, ManifestEntry, Waveform, save_manifest, save_wav
from veil.generator import NetConfig
from veil.speaker import ExtractorNetConfig, ExtractorTrainConfig, train_toy_extractor
from veil.toydata import ToyCorpusConfig, build_toy_corpus

TINY_NET = NetConfig(seg_len=512, channels=(2, 3, 4, 4))

# cheap extractor for unit tests; the acceptance run uses the default config
TINY_EXTRACTOR_NET = ExtractorNetConfig(embed_dim=16, channels=(8, 8, 16), kernels=(5, 3, 3))


def make_wave(rng, n=512, sr=16000, amp=0.5, utt=None):
    return Waveform(rng.uniform(-amp, amp, n), sr, utt)


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """2 speakers x 3 utterances of 0.512 s: enough for trainer/CLI plumbing."""
    root = tmp_path_factory.mktemp("micro-corpus")
    cfg = ToyCorpusConfig(
        n_speakers=2, utterances_per_speaker=3, duration_s=0.512, seed=7
    )
    return build_toy_corpus(root, cfg)


@pytest.fixture(scope="session")
def micro_extractor(micro_corpus):
    cfg = ExtractorTrainConfig(
        steps=40, batch_size=4, window_len=4096, seed=3, net=TINY_EXTRACTOR_NET
    )
    return train_toy_extractor(micro_corpus, cfg)


def synthetic_manifest(tmp_path, speakers, utts_per_speaker, n=4096, sr=16000, seed=0):
    """Manifest of random-noise WAVs; for trial/plumbing tests, not training."""
    rng = np.random.default_rng(seed)
    entries = []
    for s in range(speakers):
        for u in range(utts_per_speaker):
            utt = f"s{s}_u{u}"
            path = tmp_path / f"{utt}.wav"
            save_wav(Waveform(rng.uniform(-0.3, 0.3, n), sr, utt), path)
            entries.append(ManifestEntry(utt, f"s{s}", path, f"text {s} {u}"))
    manifest = Manifest(entries)
    save_manifest(manifest, tmp_path / "manifest.jsonl")
    return manifest
