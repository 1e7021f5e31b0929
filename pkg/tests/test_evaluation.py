"""Test module for classes and methods in evaluation"""

import itertools
import math
import tempfile
import time
import unittest
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from tests import RESOURCES_DIR
from xling_emotion_tts.audio_dsp import Waveform
from xling_emotion_tts.configs import (
    CorpusConfig,
    EncoderConfig,
    MelConfig,
    PerturbationSpec,
)
from xling_emotion_tts.corpus import read_manifest
from xling_emotion_tts.evaluation import (
    FORMANT_SHIFT,
    ORIGINAL_AUDIO,
    SPEAKER_ANONYMIZATION,
    EvalReport,
    MetricRow,
    ReportFormat,
    SynthesisScore,
    TimingRecord,
    aggregate_scores,
    analyze_perturbation,
    attach_rtf,
    classifier_accuracy,
    cosine_similarity,
    edit_distance,
    eecs,
    emit_report,
    measure_rtf,
    parse_report,
    render_report,
    secs,
    unit_error_rate,
)
from xling_emotion_tts.generate_corpus_job import generate_corpus
from xling_emotion_tts.perturb_corpus_job import perturb_dual
from xling_emotion_tts.perturbation import PerturbedPair
from xling_emotion_tts.ref_encoders import (
    ClassifierEncoder,
    compute_mels,
    fit_codebook,
    freeze,
)

SMALL_MEL = MelConfig(n_fft=256, win=256, hop=64, n_mels=16)
SMALL_ENCODER = EncoderConfig(channels=8, embed_dim=4, kernel_size=3)


def frozen_encoder(label_field: str, seed: int = 0) -> ClassifierEncoder:
    """Untrained encoder, frozen"""
    torch.manual_seed(seed)
    return freeze(
        ClassifierEncoder(2, SMALL_ENCODER, SMALL_MEL, 16000, label_field)
    )


def tone(freq: float, seconds: float = 0.2, amp: float = 0.5) -> Waveform:
    """Sine at 16 kHz"""
    t = np.arange(int(16000 * seconds)) / 16000
    return Waveform(
        samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=16000
    )


@lru_cache(maxsize=None)
def reference_distance(a: tuple, b: tuple) -> int:
    """Recursive Levenshtein definition"""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        reference_distance(a[1:], b) + 1,
        reference_distance(a, b[1:]) + 1,
        reference_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


class TestEmbeddingSimilarity(unittest.TestCase):
    """Tests for cosine_similarity, secs and eecs"""

    @classmethod
    def setUpClass(cls) -> None:
        """Frozen untrained encoders"""
        cls.speaker_encoder = frozen_encoder("speaker_id", 0)
        cls.emotion_encoder = frozen_encoder("emotion_id", 1)

    def test_cosine(self):
        """Tests known cosines and the zero vector"""
        self.assertAlmostEqual(0.0, cosine_similarity([1, 0], [0, 3]))
        self.assertAlmostEqual(-1.0, cosine_similarity([1, 1], [-2, -2]))
        self.assertEqual(0.0, cosine_similarity([0, 0], [1, 2]))

    def test_self_similarity_and_symmetry(self):
        """Tests that a waveform matches itself and order does not matter"""
        a, b = tone(150.0), tone(400.0, amp=0.2)
        for measure, encoder in (
            (secs, self.speaker_encoder),
            (eecs, self.emotion_encoder),
        ):
            self.assertAlmostEqual(1.0, measure(a, a, encoder), delta=1e-6)
            forward = measure(a, b, encoder)
            self.assertAlmostEqual(
                forward, measure(b, a, encoder), delta=1e-6
            )
            self.assertTrue(-1.0 <= forward <= 1.0)

    def test_wrong_encoder(self):
        """Tests that SECS needs the speaker encoder"""
        with self.assertRaises(ValueError):
            secs(tone(150.0), tone(150.0), self.emotion_encoder)

    def test_short_waveform(self):
        """Tests that audio shorter than one window is rejected"""
        short = Waveform(samples=np.zeros(100), sample_rate=16000)
        with self.assertRaises(ValueError) as e:
            eecs(tone(150.0), short, self.emotion_encoder)
        self.assertIn("second", str(e.exception))


class TestUnitErrorRate(unittest.TestCase):
    """Tests for edit_distance and unit_error_rate"""

    def test_exhaustive_against_recursive_definition(self):
        """Tests every sequence up to length 6 over three symbols"""
        alphabet = (0, 1, 2)
        predicted = [
            seq
            for length in range(7)
            for seq in itertools.product(alphabet, repeat=length)
        ]
        references = [
            seq
            for length in range(1, 4)
            for seq in itertools.product(alphabet, repeat=length)
        ]
        for a in predicted:
            for b in references:
                self.assertEqual(
                    reference_distance(a, b), edit_distance(a, b), (a, b)
                )

    def test_symmetric(self):
        """Tests that the distance does not depend on argument order"""
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.integers(0, 3, rng.integers(0, 9)).tolist()
            b = rng.integers(0, 3, rng.integers(0, 9)).tolist()
            self.assertEqual(edit_distance(a, b), edit_distance(b, a))

    def test_rate(self):
        """Tests normalization by the reference length"""
        self.assertEqual(0.0, unit_error_rate([1, 2, 3], [1, 2, 3]))
        self.assertAlmostEqual(1 / 3, unit_error_rate([1, 5, 3], [1, 2, 3]))
        self.assertEqual(1.0, unit_error_rate([], [1, 2]))
        self.assertEqual(3.0, unit_error_rate([1, 1, 1, 1], [1]))

    def test_empty_reference(self):
        """Tests that an empty reference is rejected"""
        with self.assertRaises(ValueError):
            unit_error_rate([1], [])


class TestMeasureRtf(unittest.TestCase):
    """Tests for measure_rtf"""

    @staticmethod
    def slow_synthesizer(seconds: float) -> Waveform:
        """Takes a tenth of the audio duration to produce it"""
        time.sleep(0.1 * seconds)
        return Waveform(
            samples=np.zeros(int(16000 * seconds)), sample_rate=16000
        )

    def test_known_speed(self):
        """Tests the ratio for a synthesizer of known speed"""
        durations = [0.5, 1.0, 1.5, 1.0, 1.0]
        measurement = measure_rtf(self.slow_synthesizer, durations)
        self.assertAlmostEqual(0.1, measurement.rtf, delta=0.02)
        self.assertEqual(5, measurement.utterances)
        self.assertAlmostEqual(5.0, measurement.audio_seconds)
        self.assertIn("machine", measurement.hardware)
        doubled = measure_rtf(self.slow_synthesizer, durations * 2)
        self.assertAlmostEqual(
            measurement.rtf, doubled.rtf, delta=0.2 * measurement.rtf
        )

    def test_too_few_utterances(self):
        """Tests that fewer than five utterances are rejected"""
        with self.assertRaises(ValueError):
            measure_rtf(self.slow_synthesizer, [0.1] * 4)

    def test_attach_to_timed_system(self):
        """Tests that only rows of the timed system receive the RTF"""
        measurement = measure_rtf(self.slow_synthesizer, [0.2] * 5)
        timing = TimingRecord(system="proposed", **measurement.model_dump())
        rows = [
            MetricRow(system="proposed", secs=0.5, eecs=0.5, uer=0.1),
            MetricRow(system=ORIGINAL_AUDIO, secs=1.0, eecs=1.0, uer=0.0),
        ]
        timed = attach_rtf(rows, [timing])
        self.assertAlmostEqual(measurement.rtf, timed[0].rtf)
        self.assertIsNone(timed[1].rtf)
        self.assertIsNone(rows[0].rtf)


class TestReport(unittest.TestCase):
    """Tests for MetricRow, render_report, emit_report and parse_report"""

    rows = [
        MetricRow(
            system="proposed",
            speaker_group="same",
            language="lang1",
            secs=0.71,
            eecs=0.6,
            uer=0.25,
            rtf=0.05,
        ),
        MetricRow(system=ORIGINAL_AUDIO, secs=1.0, eecs=1.0, uer=0.0),
        MetricRow(
            system="proposed",
            speaker_group="cross",
            language="lang0",
            secs=-0.1234,
            eecs=0.5,
            uer=1.5,
            utmos_proxy=3.1,
        ),
    ]

    def test_golden_tsv(self):
        """Tests the exact bytes of a one-row table"""
        row = MetricRow(
            system=FORMANT_SHIFT,
            secs=0.514,
            eecs=0.848,
            uer=0.0907,
            utmos_proxy=2.163,
        )
        expected = (RESOURCES_DIR / "report_formant_shift.tsv").read_bytes()
        with tempfile.TemporaryDirectory() as tmp:
            path = emit_report([row], ReportFormat.TSV, Path(tmp) / "r.tsv")
            self.assertEqual(expected, path.read_bytes())

    def test_sorted_and_deterministic(self):
        """Tests row order and that input order does not matter"""
        text = render_report(self.rows, "tsv")
        lines = text.strip("\n").split("\n")
        self.assertEqual(
            ["Original audio", "proposed", "proposed"],
            [line.split("\t")[0] for line in lines[1:]],
        )
        self.assertEqual("cross", lines[2].split("\t")[1])
        self.assertEqual(text, render_report(self.rows[::-1], "tsv"))

    def test_parse_rendered_tables(self):
        """Tests that both layouts read back at their precision"""
        for fmt in (ReportFormat.TSV, ReportFormat.MARKDOWN):
            parsed = parse_report(render_report(self.rows, fmt), fmt)
            self.assertEqual(3, len(parsed))
            cross = parsed[1]
            self.assertEqual("cross", cross.speaker_group)
            self.assertAlmostEqual(-0.123, cross.secs)
            self.assertAlmostEqual(1.5, cross.uer)
            self.assertAlmostEqual(3.1, cross.utmos_proxy)
            self.assertIsNone(cross.rtf)
            self.assertAlmostEqual(0.05, parsed[2].rtf)

    def test_markdown_layout(self):
        """Tests the header and separator lines"""
        lines = render_report(self.rows, "markdown").split("\n")
        self.assertTrue(lines[0].startswith("| system | speaker_group |"))
        self.assertEqual("|" + "---|" * 8, lines[1])

    def test_invalid_inputs(self):
        """Tests bad cells, bad headers and short lines"""
        with self.assertRaises(ValidationError):
            MetricRow(system="a\tb", secs=0.0, eecs=0.0, uer=0.0)
        with self.assertRaises(ValidationError):
            MetricRow(system="a", secs=1.5, eecs=0.0, uer=0.0)
        with self.assertRaises(ValueError):
            parse_report("a\tb\n", "tsv")
        text = render_report(self.rows, "tsv") + "x\ty\n"
        with self.assertRaises(ValueError) as e:
            parse_report(text, "tsv")
        self.assertIn("line 5", str(e.exception))

    def test_eval_report_sorts_rows(self):
        """Tests that EvalReport keeps rows ordered"""
        report = EvalReport(rows=self.rows)
        self.assertEqual(
            [r.sort_key for r in sorted(self.rows, key=lambda r: r.sort_key)],
            [r.sort_key for r in report.rows],
        )
        restored = EvalReport.model_validate_json(report.model_dump_json())
        self.assertEqual(report, restored)


class TestAggregation(unittest.TestCase):
    """Tests for aggregate_scores and classifier_accuracy"""

    scores = [
        SynthesisScore("a", "same", "lang0", 0.8, 0.6, 0.1, True, True),
        SynthesisScore("a", "cross", "lang0", 0.4, 0.5, 0.3, False, True),
        SynthesisScore("b", "same", "lang0", 0.6, 0.2, 0.3, True, False),
        SynthesisScore("c", "same", "lang1", 0.5, 0.5, 0.5, True, True),
    ]

    def test_group_means(self):
        """Tests one row per speaker group and language"""
        rows = aggregate_scores(self.scores, "proposed")
        self.assertEqual(
            [("cross", "lang0"), ("same", "lang0"), ("same", "lang1")],
            [(r.speaker_group, r.language) for r in rows],
        )
        self.assertAlmostEqual(0.7, rows[1].secs)
        self.assertAlmostEqual(0.4, rows[1].eecs)
        self.assertAlmostEqual(0.2, rows[1].uer)
        self.assertTrue(all(r.rtf is None for r in rows))

    def test_classifier_accuracy(self):
        """Tests overall and per-group recovery rates"""
        summary = classifier_accuracy(self.scores)
        self.assertAlmostEqual(0.75, summary["speaker_accuracy"])
        self.assertAlmostEqual(0.75, summary["emotion_accuracy"])
        self.assertAlmostEqual(1.0, summary["same_speaker_accuracy"])
        self.assertAlmostEqual(0.0, summary["cross_speaker_accuracy"])
        self.assertEqual({}, classifier_accuracy([]))


class TestAnalyzePerturbation(unittest.TestCase):
    """Tests analyze_perturbation on a tiny perturbed corpus"""

    @classmethod
    def setUpClass(cls) -> None:
        """Renders, perturbs and tokenizes a tiny corpus"""
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        corpus = CorpusConfig(
            num_speakers=2,
            num_emotions=2,
            utterances_per_pair=1,
            min_phonemes=2,
            max_phonemes=3,
            min_duration=6,
            max_duration=8,
        )
        cls.manifest = generate_corpus(corpus, root / "corpus", 0)
        cls.records = read_manifest(cls.manifest)
        cls.pair_dir = root / "perturbed"
        cls.pairs = perturb_dual(
            cls.manifest, PerturbationSpec(), cls.pair_dir
        )
        mels = compute_mels(cls.records, cls.manifest.parent, SMALL_MEL)
        cls.codebook = fit_codebook(
            np.concatenate(list(mels.values())), num_units=4, seed=0
        )
        cls.speaker_encoder = frozen_encoder("speaker_id", 0)
        cls.emotion_encoder = frozen_encoder("emotion_id", 1)

    @classmethod
    def tearDownClass(cls) -> None:
        """Removes the corpus"""
        cls.tmp.cleanup()

    def _analyze(self, pairs):
        """Runs the analysis on the shared corpus"""
        return analyze_perturbation(
            pairs,
            self.records,
            self.manifest.parent,
            self.pair_dir,
            self.speaker_encoder,
            self.emotion_encoder,
            self.codebook,
            SMALL_MEL,
        )

    def test_formant_shift_rows(self):
        """Tests the perturbed row, the reference row and the summary"""
        analysis = self._analyze(self.pairs)
        perturbed, original = analysis.rows
        self.assertEqual(FORMANT_SHIFT, perturbed.system)
        self.assertEqual(ORIGINAL_AUDIO, original.system)
        self.assertEqual(
            (1.0, 1.0, 0.0), (original.secs, original.eecs, original.uer)
        )
        self.assertTrue(-1.0 <= perturbed.secs <= 1.0)
        self.assertGreaterEqual(perturbed.uer, 0.0)
        self.assertEqual(
            {
                "clean_speaker_accuracy",
                "clean_emotion_accuracy",
                "perturbed_speaker_accuracy",
                "perturbed_emotion_accuracy",
            },
            set(analysis.summary),
        )

    def test_external_pairs(self):
        """Tests that pairs without factors are reported as anonymization"""
        external = [
            PerturbedPair(
                source_id=p.source_id,
                wav_for_R=p.wav_for_R,
                wav_for_E=p.wav_for_E,
            )
            for p in self.pairs
        ]
        self.assertTrue(math.isnan(external[0].factor_R))
        analysis = self._analyze(external)
        self.assertEqual(SPEAKER_ANONYMIZATION, analysis.rows[0].system)

    def test_no_matching_records(self):
        """Tests that pairs of unknown utterances are skipped"""
        stranger = PerturbedPair(
            source_id="unknown", wav_for_R="a.wav", wav_for_E="b.wav"
        )
        analysis = self._analyze([stranger])
        self.assertEqual([], analysis.rows)


if __name__ == "__main__":
    unittest.main()
