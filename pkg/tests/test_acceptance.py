"""Acceptance suite: exact signal identities, oracle equivalence, and the
desk-scale directional reproduction on the synthetic corpus.

Each criterion prints one PASS/FAIL line. The desk-scale pipeline (toy
corpus, toy extractor, 30-epoch joint training, protect/restore/purify,
trial scoring) runs once in a session fixture and backs criterion 8.
"""

import filecmp
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from veil import pipeline
from veil.audio import compute_snr, load_manifest, load_wav
from veil.generator import NetConfig, new_generator
from veil.losses import (
    cosine_similarity_loss,
    generator_loss,
    joint_loss,
    mask_match_loss,
    noise_reversal_loss,
    quality_loss,
    reversal_loss,
)
from veil.metrics import REPORT_SCHEMA
from veil.purify import PurifyConfig, purify_add_noise, purify_median, purify_quantize
from veil.removal import apply_reverse
from veil.speaker import (
    ExtractorTrainConfig,
    build_trials,
    compute_eer,
    eer_percent,
    train_toy_extractor,
)
from veil.toydata import ToyCorpusConfig, build_toy_corpus, split_manifest
from veil.training import Checkpoint, TrainingConfig, gradcheck, train_joint, write_loss_csv

from test_purify import median_oracle
from test_speaker import brute_force_eer

EPSILON = 0.05

DESK_TRAIN = TrainingConfig(
    seg_len=16384, batch_size=2, learning_rate=5e-3, epochs=30, seed=0
)


@contextmanager
def criterion(n: int, desc: str):
    try:
        yield
    except BaseException:
        print(f"CRITERION {n} FAIL: {desc}")
        raise
    print(f"CRITERION {n} PASS: {desc}")


@dataclass
class DeskRun:
    root: Path
    manifest: object
    heldout_ids: list
    extractor: object
    checkpoint: Checkpoint
    eer: dict
    snr: dict
    elapsed_s: float


def _file_snrs(ref_manifest, test_manifest, utt_ids):
    out = {}
    for utt in utt_ids:
        ref = load_wav(ref_manifest.by_id(utt).path, utt)
        test = load_wav(test_manifest.by_id(utt).path, utt)
        out[utt] = compute_snr(ref, test)
    return out


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    t0 = time.time()
    root = tmp_path_factory.mktemp("desk-run")
    manifest = build_toy_corpus(root / "rec", ToyCorpusConfig())
    train_m, heldout_m = split_manifest(manifest, heldout_per_speaker=5, seed=0)
    heldout_ids = sorted(e.utterance_id for e in heldout_m)

    extractor = train_toy_extractor(train_m, ExtractorTrainConfig(steps=200, seed=0))
    extractor.save(root / "extractor.veil")

    ckpt = train_joint(train_m, DESK_TRAIN, extractor, checkpoint_path=root / "joint.veil")
    write_loss_csv(ckpt, root / "joint.losses.csv")

    adv_m, _ = pipeline.protect_manifest(manifest, ckpt, root / "adv")
    rst_m, _ = pipeline.restore_manifest(adv_m, ckpt, root / "rst")
    an_m, _ = pipeline.purify_manifest(adv_m, PurifyConfig(method="add_noise"), root / "an", seed=0)
    qt_m, _ = pipeline.purify_manifest(adv_m, PurifyConfig(method="quantize"), root / "qt")
    ms_m, _ = pipeline.purify_manifest(adv_m, PurifyConfig(method="median_smooth"), root / "ms")

    backend = pipeline.backend_from_extractor(extractor)
    trials = build_trials(manifest, targets_per_speaker=10, nontargets_per_speaker=30, seed=0)
    eer = {}
    for name, test_m in (("rec-rec", manifest), ("rec-adv", adv_m), ("rec-rst", rst_m)):
        scored = pipeline.score_trials(trials, manifest, test_m, backend)
        eer[name] = eer_percent([(s, t.is_target) for t, s in scored])

    snr = {
        name: _file_snrs(manifest, test_m, heldout_ids)
        for name, test_m in (
            ("adv", adv_m), ("rst", rst_m), ("an", an_m), ("qt", qt_m), ("ms", ms_m),
        )
    }
    return DeskRun(
        root=root,
        manifest=manifest,
        heldout_ids=heldout_ids,
        extractor=extractor,
        checkpoint=ckpt,
        eer=eer,
        snr=snr,
        elapsed_s=time.time() - t0,
    )


class TestCriterion1ExactCancellation:
    def test_oracle_substitution_restores_input(self):
        with criterion(1, "exact-cancellation identity on 100 random segments"):
            cfg = NetConfig(seg_len=512, channels=(2, 3, 4, 4))
            rng = np.random.default_rng(0)
            t0 = time.time()
            worst = 0.0
            with torch.no_grad():
                for i in range(100):
                    g = new_generator(cfg, i)
                    x = torch.from_numpy(rng.uniform(-0.9, 0.9, (1, cfg.seg_len)))
                    parts, x_adv, _ = g.generate(x, EPSILON)
                    restored, _ = apply_reverse(
                        x_adv, parts.epsilon * (-parts.noise) * parts.mask
                    )
                    worst = max(worst, float((restored - x).abs().max()))
            elapsed = time.time() - t0
            assert worst <= 1e-6, f"max abs restoration error {worst}"
            assert elapsed < 1.0, f"took {elapsed:.2f}s"


class TestCriterion2PerturbationBound:
    def test_linf_bound_over_random_configurations(self):
        with criterion(2, "perturbation bound over 1000 random configurations"):
            rng = np.random.default_rng(1)
            arch_pool = [
                (256, (2, 2)),
                (256, (3, 4)),
                (512, (2, 3, 4)),
                (512, (2, 3, 4, 4)),
                (1024, (4, 4, 4)),
            ]
            violations = 0
            with torch.no_grad():
                for i in range(1000):
                    seg_len, channels = arch_pool[int(rng.integers(len(arch_pool)))]
                    g = new_generator(NetConfig(seg_len=seg_len, channels=channels), i)
                    x = torch.from_numpy(rng.uniform(-1.0, 1.0, (1, seg_len)))
                    parts, x_adv, _ = g.generate(x, EPSILON)
                    if float(parts.perturbation.abs().max()) >= EPSILON:
                        violations += 1
                    if float((x_adv - x).abs().max()) >= EPSILON:
                        violations += 1
            assert violations == 0


class TestCriterion3GradientVerification:
    def test_gradcheck_under_tolerance(self):
        with criterion(3, "gradcheck vs central finite differences"):
            t0 = time.time()
            report = gradcheck(seed=0)
            elapsed = time.time() - t0
            assert report.max_relative_error < 1e-3, report.max_relative_error
            assert elapsed < 60.0, f"took {elapsed:.1f}s"


class TestCriterion4LossUnitValues:
    def test_all_stated_examples(self):
        with criterion(4, "loss operations reproduce every stated example"):
            z = torch.tensor([0.2, -0.7, 1.1], dtype=torch.float64)
            assert float(cosine_similarity_loss(z, z)) == pytest.approx(1.0, abs=1e-12)
            assert float(cosine_similarity_loss(z, -z)) == pytest.approx(-1.0, abs=1e-12)
            assert float(cosine_similarity_loss([1.0, 0.0], [0.0, 1.0])) == 0.0

            x = torch.zeros(4, dtype=torch.float64)
            unit = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
            assert float(quality_loss(x, x, torch.zeros(4), 0.01)) == 0.0
            assert float(quality_loss(x, unit, torch.zeros(4), 0.01)) == pytest.approx(
                0.99, abs=1e-12
            )
            mask10 = torch.full((4,), 5.0, dtype=torch.float64)
            assert float(quality_loss(x, x, mask10, 0.01)) == pytest.approx(0.1, abs=1e-12)

            assert float(generator_loss(1.0, 0.0, 0.007)) == pytest.approx(0.993, abs=1e-12)
            assert float(generator_loss(0.4, 0.4, 0.5)) == pytest.approx(0.4, abs=1e-12)
            assert float(generator_loss(0.8, 5.0, 1e-12)) == pytest.approx(0.8, abs=1e-9)

            n = torch.tensor([0.3, -0.4], dtype=torch.float64)
            assert float(noise_reversal_loss(n, -n)) == 0.0
            assert float(noise_reversal_loss(torch.ones(1), torch.ones(1))) == pytest.approx(
                2.0, abs=1e-12
            )

            m = torch.rand(8, dtype=torch.float64)
            assert float(mask_match_loss(m, m)) == 0.0
            assert float(mask_match_loss(torch.ones(4), torch.zeros(4))) == pytest.approx(
                2.0, abs=1e-12
            )

            assert float(reversal_loss(0.0, 1.0, 0.8)) == pytest.approx(0.8, abs=1e-12)
            assert float(reversal_loss(0.0, 0.0, 0.8)) == 0.0
            assert float(reversal_loss(2.0, 4.0, 0.5)) == pytest.approx(3.0, abs=1e-12)

            assert float(joint_loss(1.0, 0.0, 0.06)) == pytest.approx(0.94, abs=1e-12)
            assert float(joint_loss(0.0, 1.0, 0.06)) == pytest.approx(0.06, abs=1e-12)
            for theta in (0.06, 0.5):
                assert float(joint_loss(1.7, 1.7, theta)) == pytest.approx(1.7, abs=1e-12)


class TestCriterion5DspOracles:
    def test_quantization_median_and_noise(self):
        with criterion(5, "quantization, median and add-noise oracles"):
            rng = np.random.default_rng(2)
            for _ in range(1000):
                from veil.audio import Waveform

                x = Waveform(rng.uniform(-1, 1, int(rng.integers(16, 128))), 16000)
                once = purify_quantize(x, 256)
                twice = purify_quantize(once, 256)
                np.testing.assert_array_equal(once.samples, twice.samples)
                assert float(np.max(np.abs(once.samples - x.samples))) <= 1 / 512

            for _ in range(1000):
                from veil.audio import Waveform

                n = int(rng.integers(8, 100))
                kernel = int(rng.choice([1, 3, 5]))
                x = Waveform(rng.uniform(-1, 1, n), 16000)
                np.testing.assert_array_equal(
                    purify_median(x, kernel).samples, median_oracle(x.samples, kernel)
                )

            from veil.audio import Waveform

            for seed in range(20):
                x = Waveform(0.1 * np.random.default_rng(seed).standard_normal(3000), 16000)
                out = purify_add_noise(x, 25.0, seed=seed)
                assert compute_snr(x, out) == pytest.approx(25.0, abs=0.01)


class TestCriterion6EerOracle:
    def test_eer_matches_enumeration(self):
        with criterion(6, "EER equals brute-force threshold enumeration"):
            assert compute_eer(
                [(0.9, True), (0.8, True), (0.1, False), (0.2, False)]
            ) == 0.0
            same = [(0.4, True), (0.6, True), (0.4, False), (0.6, False)]
            assert compute_eer(same) == pytest.approx(0.5, abs=1e-12)
            rng = np.random.default_rng(3)
            for _ in range(1000):
                n_t = int(rng.integers(1, 9))
                n_n = int(rng.integers(1, 13))
                scores = [(round(float(rng.random()), 1), True) for _ in range(n_t)]
                scores += [(round(float(rng.random()), 1), False) for _ in range(n_n)]
                assert compute_eer(scores) == pytest.approx(
                    brute_force_eer(scores), abs=1e-9
                )


class TestCriterion7MetricSelfConsistency:
    def test_reference_against_itself(self, desk_run):
        with criterion(7, "test-equals-reference metric row (inf SNR, 1.00/0.00, 0 WER)"):
            manifest = desk_run.manifest
            texts = {e.utterance_id: e.text for e in manifest}
            paths = {Path(e.path).resolve(): e.utterance_id for e in manifest}

            def identity_asr(path):
                return texts[paths[Path(path).resolve()]]

            trials = build_trials(manifest, 1, 5, seed=0)
            backend = pipeline.backend_from_extractor(desk_run.extractor)
            report, _ = pipeline.evaluate_condition(
                "rec-rec", manifest, manifest, backend, trials=trials,
                asr_backend=identity_asr,
            )
            assert math.isinf(report.snr_db)
            assert report.to_json_dict()["snr_db"] == "inf"
            assert report.pitch_corr_mean == pytest.approx(1.0, abs=1e-9)
            assert report.pitch_corr_std == pytest.approx(0.0, abs=1e-9)
            assert report.wer_percent == 0.0
            assert report.eer_percent == pytest.approx(0.0, abs=1e-12)
            import jsonschema

            jsonschema.validate(report.to_json_dict(), REPORT_SCHEMA)


class TestCriterion8DeskScale:
    def test_directional_reproduction(self, desk_run):
        with criterion(8, "desk-scale protection/restoration ordering"):
            eer, snr = desk_run.eer, desk_run.snr
            held = desk_run.heldout_ids
            print(
                f"  EER: rec-rec {eer['rec-rec']:.2f}%  rec-adv {eer['rec-adv']:.2f}%  "
                f"rec-rst {eer['rec-rst']:.2f}%"
            )
            means = {k: float(np.mean(list(v.values()))) for k, v in snr.items()}
            print(
                "  held-out SNR means: "
                + "  ".join(f"{k} {v:.2f} dB" for k, v in means.items())
            )
            assert desk_run.extractor.train_accuracy > 0.9
            # (a) protection raises EER by at least 5 points
            assert eer["rec-adv"] >= eer["rec-rec"] + 5.0
            # (b) restoration returns EER to within 2 points of clean
            assert abs(eer["rec-rst"] - eer["rec-rec"]) <= 2.0
            # (c) removal beats the adversarial SNR on >= 90% of held-out
            better = sum(snr["rst"][u] > snr["adv"][u] for u in held)
            assert better >= math.ceil(0.9 * len(held)), f"{better}/{len(held)}"
            # (d) every purification baseline stays below the joint removal
            for method in ("an", "qt", "ms"):
                assert means[method] < means["rst"], method
            assert desk_run.elapsed_s < 900, f"pipeline took {desk_run.elapsed_s:.0f}s"

    def test_training_curves_moved_the_right_way(self, desk_run):
        h = desk_run.checkpoint.loss_history
        n = len(h["step"])
        per_epoch = n // DESK_TRAIN.epochs
        first = slice(0, per_epoch)
        last = slice(n - per_epoch, n)
        assert np.mean(h["loss_cosine"][last]) < np.mean(h["loss_cosine"][first])
        rev_first = np.mean(h["loss_noise"][first]) + np.mean(h["loss_mask"][first])
        rev_last = np.mean(h["loss_noise"][last]) + np.mean(h["loss_mask"][last])
        assert rev_last < rev_first

    def test_trained_masks_respond_to_input(self, desk_run):
        generator = desk_run.checkpoint.build_generator()
        entries = desk_run.manifest.entries
        a = load_wav(entries[0].path).samples
        b = load_wav(entries[1].path).samples
        with torch.no_grad():
            mask_a = generator.decode_mask(generator.encode(torch.from_numpy(a)))
            mask_b = generator.decode_mask(generator.encode(torch.from_numpy(b)))
        assert not torch.allclose(mask_a, mask_b)

    def test_removal_predicts_reversed_perturbation(self, desk_run):
        generator = desk_run.checkpoint.build_generator()
        removal = desk_run.checkpoint.build_removal()
        eps = desk_run.checkpoint.epsilon
        agreements = []
        for utt in desk_run.heldout_ids[:8]:
            x = torch.from_numpy(load_wav(desk_run.manifest.by_id(utt).path).samples)
            with torch.no_grad():
                parts, x_adv, _ = generator.generate(x, eps)
                rev = removal.predict_reverse(x_adv, eps)
            delta = parts.perturbation.reshape(-1)
            rev_delta = rev.reverse_perturbation.reshape(-1)
            cos = float(
                torch.dot(rev_delta, -delta)
                / (rev_delta.norm() * delta.norm())
            )
            agreements.append(cos)
        assert all(c > 0 for c in agreements), agreements


def _reduced_pipeline(root: Path, monkeypatch) -> None:
    monkeypatch.setenv("VEIL_CACHE_DIR", str(root / "cache"))
    corpus = build_toy_corpus(
        root / "rec",
        ToyCorpusConfig(n_speakers=2, utterances_per_speaker=3, duration_s=0.512, seed=11),
    )
    extractor = train_toy_extractor(
        corpus, ExtractorTrainConfig(steps=20, batch_size=4, window_len=4096, seed=11)
    )
    extractor.save(root / "extractor.veil")
    config = TrainingConfig(
        seg_len=4096, channels=(2, 3, 4, 4), batch_size=4, epochs=2,
        learning_rate=1e-3, seed=11,
    )
    ckpt = train_joint(corpus, config, extractor, checkpoint_path=root / "joint.veil")
    write_loss_csv(ckpt, root / "joint.losses.csv")
    adv_m, _ = pipeline.protect_manifest(corpus, ckpt, root / "adv")
    pipeline.restore_manifest(adv_m, ckpt, root / "rst")
    pipeline.purify_manifest(adv_m, PurifyConfig(method="add_noise"), root / "an", seed=5)
    backend = pipeline.backend_from_extractor(extractor)
    trials = build_trials(corpus, 1, 3, seed=11)
    report, scored = pipeline.evaluate_condition(
        "rec-adv", corpus, adv_m, backend, trials=trials
    )
    from veil.speaker import save_scores, save_trials

    cache = pipeline.cache_dir()
    save_trials(trials, cache / "rec-adv.trials.txt")
    save_scores(scored, cache / "rec-adv.scores.txt")
    (root / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )


class TestCriterion9Determinism:
    def test_two_runs_bit_identical(self, tmp_path, monkeypatch):
        with criterion(9, "same-seed pipeline runs are bit-identical"):
            run_a, run_b = tmp_path / "a", tmp_path / "b"
            _reduced_pipeline(run_a, monkeypatch)
            _reduced_pipeline(run_b, monkeypatch)
            files_a = sorted(
                p.relative_to(run_a) for p in run_a.rglob("*") if p.is_file()
            )
            files_b = sorted(
                p.relative_to(run_b) for p in run_b.rglob("*") if p.is_file()
            )
            assert files_a == files_b and files_a
            mismatches = [
                str(rel)
                for rel in files_a
                if not filecmp.cmp(run_a / rel, run_b / rel, shallow=False)
            ]
            assert not mismatches, f"differing artifacts: {mismatches}"
