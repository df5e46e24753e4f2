import json
import math

import jsonschema
import numpy as np
import pytest

from veil.audio import Waveform
from veil.metrics import (
    REPORT_SCHEMA,
    EditCounts,
    PitchContour,
    UtteranceMetrics,
    align_tokens,
    assemble_report,
    extract_pitch,
    pitch_correlation,
    pitch_stats,
    quality_score,
    tokenize,
    word_error_rate,
)


def tone(freq, duration=1.0, sr=16000, amp=0.5):
    t = np.arange(int(duration * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def wer_distance_oracle(ref, hyp):
    """Plain recursive-memo edit distance, independent of the aligner."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
        )

    return d(len(ref), len(hyp))


class TestExtractPitch:
    @pytest.mark.parametrize("freq", [100, 150, 220, 330])
    def test_tone_frequency_recovered(self, freq):
        contour = extract_pitch(tone(freq))
        voiced = contour.frame_hz[contour.frame_hz > 0]
        assert voiced.size == contour.frame_hz.size
        assert abs(float(np.median(voiced)) - freq) < 2.0

    def test_white_noise_mostly_unvoiced(self):
        rng = np.random.default_rng(0)
        w = Waveform(0.3 * rng.standard_normal(16000), 16000)
        contour = extract_pitch(w)
        assert np.mean(contour.frame_hz == 0) >= 0.9

    def test_silence_all_unvoiced(self):
        w = Waveform(np.zeros(8000), 16000)
        contour = extract_pitch(w)
        assert np.all(contour.frame_hz == 0)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="short"):
            extract_pitch(Waveform(np.zeros(100), 16000))

    def test_band_limits_respected(self):
        contour = extract_pitch(tone(220))
        voiced = contour.frame_hz[contour.frame_hz > 0]
        assert np.all((voiced >= 60.0) & (voiced <= 400.0))

    def test_frame_rate(self):
        contour = extract_pitch(tone(150))
        assert contour.frame_rate == pytest.approx(100.0)


class TestPitchCorrelation:
    def test_identical_contours_score_one(self):
        c = extract_pitch(tone(220))
        assert pitch_correlation(c, c) == 1.0

    def test_identical_constant_contours_score_one(self):
        c = PitchContour(np.array([150.0, 150.0, 150.0]), 100.0)
        assert pitch_correlation(c, c) == 1.0

    def test_anticorrelated_contours(self):
        ref = PitchContour(np.array([100.0, 120.0, 100.0, 120.0]), 100.0)
        test = PitchContour(np.array([120.0, 100.0, 120.0, 100.0]), 100.0)
        assert pitch_correlation(ref, test) == pytest.approx(-1.0, abs=1e-12)

    def test_matches_numpy_corrcoef(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 40))
            a = rng.uniform(60, 400, n)
            b = rng.uniform(60, 400, n)
            got = pitch_correlation(PitchContour(a, 100.0), PitchContour(b, 100.0))
            expect = float(np.corrcoef(a, b)[0, 1])
            assert got == pytest.approx(expect, abs=1e-9)

    def test_joint_voicing_restriction(self):
        # only frames 1 and 3 are voiced in both; their values agree there
        ref = PitchContour(np.array([100.0, 110.0, 0.0, 130.0]), 100.0)
        test = PitchContour(np.array([0.0, 110.0, 120.0, 130.0]), 100.0)
        assert pitch_correlation(ref, test) == pytest.approx(1.0, abs=1e-12)

    def test_shorter_contour_padded_with_unvoiced(self):
        ref = PitchContour(np.array([100.0, 120.0, 140.0]), 100.0)
        test = PitchContour(np.array([100.0, 120.0]), 100.0)
        got = pitch_correlation(ref, test)
        assert got == pytest.approx(1.0)

    def test_fewer_than_two_joint_frames_is_no_value(self):
        ref = PitchContour(np.array([100.0, 0.0]), 100.0)
        test = PitchContour(np.array([100.0, 120.0]), 100.0)
        assert pitch_correlation(ref, test) is None

    def test_zero_variance_is_no_value(self):
        ref = PitchContour(np.array([100.0, 100.0, 100.0]), 100.0)
        test = PitchContour(np.array([100.0, 120.0, 140.0]), 100.0)
        assert pitch_correlation(ref, test) is None


class TestPitchStats:
    def test_all_ones(self):
        assert pitch_stats([1.0, 1.0, 1.0]) == (1.0, 0.0)

    def test_population_statistics(self):
        mean, std = pitch_stats([0.0, 2.0])
        assert (mean, std) == (1.0, 1.0)

    def test_single_value(self):
        assert pitch_stats([0.77]) == (0.77, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pitch_stats([])


class TestTokenize:
    def test_lowercase_strip_punct_split(self):
        assert tokenize("Hello, World! it's me.") == ["hello", "world", "its", "me"]

    def test_whitespace_collapsed(self):
        assert tokenize("  a\t b \n c ") == ["a", "b", "c"]


class TestWer:
    def test_identical_is_zero(self):
        assert word_error_rate(["a", "b", "c"], ["a", "b", "c"]) == 0.0

    def test_single_substitution_of_three(self):
        assert word_error_rate(["a", "b", "c"], ["a", "x", "c"]) == pytest.approx(
            33.33, abs=0.01
        )

    def test_empty_hypothesis_all_deletions(self):
        assert word_error_rate(["a", "b"], []) == 100.0
        counts = align_tokens(["a", "b"], [])
        assert (counts.substitutions, counts.deletions, counts.insertions) == (0, 2, 0)

    def test_insertions_can_exceed_100(self):
        assert word_error_rate(["a"], ["a", "b", "c"]) == 200.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            word_error_rate([], ["a"])

    def test_ties_resolve_to_substitutions(self):
        counts = align_tokens(["a", "b"], ["b", "a"])
        assert counts.errors == 2
        assert (counts.substitutions, counts.deletions, counts.insertions) == (2, 0, 0)

    def test_exhaustive_small_cases_match_oracle(self):
        vocab = ("a", "b")
        seqs = [()]
        for _ in range(3):
            seqs += [s + (w,) for s in seqs for w in vocab]
        seqs = list(dict.fromkeys(seqs))
        for ref in seqs:
            if not ref:
                continue
            for hyp in seqs:
                got = align_tokens(list(ref), list(hyp)).errors
                assert got == wer_distance_oracle(ref, hyp), (ref, hyp)

    def test_random_cases_match_oracle(self):
        rng = np.random.default_rng(2)
        vocab = list("abcdef")
        for _ in range(200):
            ref = tuple(rng.choice(vocab, size=rng.integers(1, 12)))
            hyp = tuple(rng.choice(vocab, size=rng.integers(0, 12)))
            expect = 100.0 * wer_distance_oracle(ref, hyp) / len(ref)
            assert word_error_rate(list(ref), list(hyp)) == pytest.approx(expect)


class TestQualityScore:
    def test_backend_passthrough(self):
        w = tone(220, 0.1)
        assert quality_score(w, w, lambda r, t: 4.5) == 4.5

    def test_absent_backend_gives_none(self):
        w = tone(220, 0.1)
        assert quality_score(w, w, None) is None

    def test_rate_mismatch_rejected(self):
        a = Waveform(np.zeros(100), 16000)
        b = Waveform(np.zeros(100), 8000)
        with pytest.raises(ValueError):
            quality_score(a, b, lambda r, t: 1.0)

    def test_backend_failure_propagates(self):
        w = tone(220, 0.1)

        def broken(r, t):
            raise RuntimeError("backend exploded")

        with pytest.raises(RuntimeError, match="exploded"):
            quality_score(w, w, broken)


class TestReport:
    def _metrics(self, **kw):
        base = dict(utterance_id="u", snr_db=30.0, pitch_corr=1.0)
        base.update(kw)
        return UtteranceMetrics(**base)

    def test_infinite_snr_serialized_as_inf_string(self):
        report = assemble_report("rec-rec", [self._metrics(snr_db=math.inf)])
        d = report.to_json_dict()
        assert d["snr_db"] == "inf"
        jsonschema.validate(d, REPORT_SCHEMA)

    def test_pitch_aggregation(self):
        report = assemble_report(
            "c", [self._metrics(utterance_id="a"), self._metrics(utterance_id="b")]
        )
        assert report.pitch_corr_mean == pytest.approx(1.0)
        assert report.pitch_corr_std == pytest.approx(0.0)
        assert report.excluded_pitch_count == 0

    def test_excluded_pitch_counted(self):
        report = assemble_report(
            "c",
            [
                self._metrics(utterance_id="a"),
                self._metrics(utterance_id="b", pitch_corr=None),
            ],
        )
        assert report.excluded_pitch_count == 1
        assert report.n_utterances == 2

    def test_wer_pools_edit_counts(self):
        ms = [
            self._metrics(utterance_id="a", edits=EditCounts(1, 0, 0, 4)),
            self._metrics(utterance_id="b", edits=EditCounts(0, 1, 1, 6)),
        ]
        report = assemble_report("c", ms)
        assert report.wer_percent == pytest.approx(100.0 * 3 / 10)

    def test_optional_fields_absent(self):
        report = assemble_report("c", [self._metrics()])
        d = report.to_json_dict()
        assert d["eer_percent"] is None
        assert d["quality_score"] is None
        assert d["wer_percent"] is None
        jsonschema.validate(d, REPORT_SCHEMA)

    def test_json_round_trip_and_schema(self):
        report = assemble_report(
            "rec-adv",
            [self._metrics(quality=3.5, edits=EditCounts(1, 0, 0, 5))],
            eer_percent=12.5,
        )
        d = json.loads(json.dumps(report.to_json_dict()))
        jsonschema.validate(d, REPORT_SCHEMA)
        assert d["eer_percent"] == 12.5
        assert d["quality_score"] == 3.5
        assert d["pitch_convention"]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assemble_report("c", [])
