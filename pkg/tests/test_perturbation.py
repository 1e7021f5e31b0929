"""Test module for classes and methods in perturbation and
perturb_corpus_job"""

import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
from pydantic import ValidationError
from scipy import stats

from xling_emotion_tts.audio_dsp import load_wav
from xling_emotion_tts.configs import (
    CorpusConfig,
    PerturbationSpec,
    PerturbationStrategy,
)
from xling_emotion_tts.corpus import read_manifest
from xling_emotion_tts.exceptions import (
    MissingArtifactError,
    PluginNotProvidedError,
)
from xling_emotion_tts.generate_corpus_job import generate_corpus
from xling_emotion_tts.perturb_corpus_job import (
    JobSettings,
    PerturbCorpusJob,
    perturb_dual,
)
from xling_emotion_tts.perturbation import (
    STREAM_E,
    STREAM_R,
    ExternalAnonymizerPerturber,
    FormantShiftPerturber,
    PerturbedPair,
    factor_from_draws,
    get_perturber,
    ingest_anonymized_pairs,
    parse_pairs,
    perturb_file,
    perturbation_rng,
    read_pairs,
    sample_factor,
    serialize_pairs,
)

TINY_CORPUS = CorpusConfig(
    num_speakers=2,
    num_emotions=2,
    utterances_per_pair=2,
    min_phonemes=2,
    max_phonemes=3,
    min_duration=6,
    max_duration=8,
)


class TestSampleFactor(unittest.TestCase):
    """Tests for the factor sampler"""

    def test_branches(self):
        """Tests that the branch draw picks the magnitude or its reciprocal"""
        self.assertEqual(1.25, factor_from_draws(1.25, 0.5))
        self.assertEqual(0.8, factor_from_draws(1.25, 0.49))

    def test_statistics(self):
        """Tests range, branch balance and magnitude over many draws"""
        rng = np.random.default_rng(0)
        factors = np.array([sample_factor(rng) for _ in range(10000)])
        self.assertTrue(np.all(factors >= 1.0 / 1.4 - 1e-12))
        self.assertTrue(np.all(factors <= 1.4))
        self.assertAlmostEqual(0.5, np.mean(factors >= 1.0), delta=0.02)
        magnitude = np.maximum(factors, 1.0 / factors)
        self.assertAlmostEqual(1.2, np.mean(magnitude), delta=0.01)
        log_magnitude = np.abs(np.log(factors))
        _, p_value = stats.ks_2samp(
            log_magnitude[factors >= 1.0], log_magnitude[factors < 1.0]
        )
        self.assertGreater(p_value, 0.01)

    def test_custom_range(self):
        """Tests that draws respect a configured range"""
        spec = PerturbationSpec(factor_low=1.5, factor_high=2.0)
        rng = np.random.default_rng(1)
        for _ in range(200):
            factor = sample_factor(rng, spec)
            self.assertTrue(1.5 <= max(factor, 1 / factor) <= 2.0)

    def test_invalid_range(self):
        """Tests that ranges outside [1, 2] are rejected"""
        with self.assertRaises(ValidationError):
            PerturbationSpec(factor_low=0.8, factor_high=1.2)
        with self.assertRaises(ValidationError):
            PerturbationSpec(factor_low=1.3, factor_high=1.3)

    def test_streams_are_independent(self):
        """Tests that R, E and epoch streams differ and are reproducible"""

        def draw(*keys):
            """First uniform draw of a stream"""
            return perturbation_rng(0, "utt", *keys).uniform()

        self.assertNotEqual(draw(STREAM_R), draw(STREAM_E))
        self.assertNotEqual(draw(STREAM_R, 0), draw(STREAM_R, 1))
        self.assertEqual(draw(STREAM_E, 2), draw(STREAM_E, 2))


class TestPerturbers(unittest.TestCase):
    """Tests for the strategy objects"""

    def test_get_perturber(self):
        """Tests the strategy lookup"""
        self.assertIsInstance(
            get_perturber(PerturbationSpec()), FormantShiftPerturber
        )
        external = PerturbationSpec(
            strategy=PerturbationStrategy.EXTERNAL_ANONYMIZER
        )
        self.assertIsInstance(
            get_perturber(external), ExternalAnonymizerPerturber
        )

    def test_external_anonymizer_not_provided(self):
        """Tests that the anonymizer plug-in point raises"""
        perturber = get_perturber(
            PerturbationSpec(strategy=PerturbationStrategy.EXTERNAL_ANONYMIZER)
        )
        with self.assertRaises(PluginNotProvidedError):
            perturber.perturb(None, np.random.default_rng(0))

    def test_perturb_file(self):
        """Tests that a perturbed file keeps length and sample rate"""
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_corpus(TINY_CORPUS, Path(tmp) / "c", seed=0)
            record = read_manifest(manifest)[0]
            source = record.resolve_wav(manifest.parent)
            out_path = perturb_file(
                source,
                PerturbationSpec(),
                np.random.default_rng(4),
                Path(tmp) / "out.wav",
            )
            clean = load_wav(source)
            perturbed = load_wav(out_path)
        self.assertEqual(clean.samples.size, perturbed.samples.size)
        self.assertEqual(clean.sample_rate, perturbed.sample_rate)
        self.assertFalse(np.array_equal(clean.samples, perturbed.samples))


class TestPairManifest(unittest.TestCase):
    """Tests for PerturbedPair and the pair manifest text"""

    def test_parse_serialized(self):
        """Tests that factors, including nan, parse back"""
        pairs = [
            PerturbedPair(
                source_id="a",
                wav_for_R="wavs/a_R.wav",
                wav_for_E="wavs/a_E.wav",
                factor_R=1.2345678901234,
                factor_E=0.8,
            ),
            PerturbedPair(
                source_id="b", wav_for_R="/x/b_R.wav", wav_for_E="/x/b_E.wav"
            ),
        ]
        parsed = parse_pairs(serialize_pairs(pairs))
        self.assertEqual(1.2345678901234, parsed[0].factor_R)
        self.assertTrue(math.isnan(parsed[1].factor_E))
        self.assertEqual("/x/b_R.wav", parsed[1].wav_for_R)

    def test_identical_paths_rejected(self):
        """Tests that both streams must point at different files"""
        with self.assertRaises(ValidationError):
            PerturbedPair(
                source_id="a", wav_for_R="wavs/a.wav", wav_for_E="wavs/a.wav"
            )

    def test_resolve(self):
        """Tests that relative paths resolve against the manifest dir"""
        pair = PerturbedPair(
            source_id="a", wav_for_R="wavs/a_R.wav", wav_for_E="/abs/a_E.wav"
        )
        wav_r, wav_e = pair.resolve("/data/perturbed")
        self.assertEqual(Path("/data/perturbed/wavs/a_R.wav"), wav_r)
        self.assertEqual(Path("/abs/a_E.wav"), wav_e)

    def test_bad_line(self):
        """Tests that a malformed line names its number"""
        with self.assertRaises(ValueError) as e:
            parse_pairs("a\tb\tc\n")
        self.assertIn("line 1", str(e.exception))


class TestPerturbCorpusJob(unittest.TestCase):
    """Tests PerturbCorpusJob class"""

    @classmethod
    def setUpClass(cls) -> None:
        """Renders a tiny corpus shared by the tests"""
        cls.tmp = tempfile.TemporaryDirectory()
        cls.manifest = generate_corpus(
            TINY_CORPUS, Path(cls.tmp.name) / "corpus", seed=0
        )
        cls.records = read_manifest(cls.manifest)

    @classmethod
    def tearDownClass(cls) -> None:
        """Removes the corpus"""
        cls.tmp.cleanup()

    def test_class_constructor(self):
        """Tests that job settings can be constructed from serialized json."""
        job_settings = JobSettings(
            manifest_path=self.manifest, output_directory="out"
        )
        deserialized_settings = job_settings.model_validate_json(
            job_settings.model_dump_json()
        )
        self.assertEqual(job_settings, deserialized_settings)

    @patch("logging.debug")
    def test_perturb_dual(self, mock_log_debug: MagicMock):
        """Tests that two distinct perturbations exist for every record"""
        with tempfile.TemporaryDirectory() as tmp:
            out_dir = Path(tmp) / "perturbed"
            pairs = perturb_dual(self.manifest, PerturbationSpec(), out_dir)
            written = read_pairs(out_dir / "pairs.tsv")
            self.assertEqual(len(self.records), len(pairs))
            self.assertEqual(
                [r.utterance_id for r in self.records],
                [p.source_id for p in written],
            )
            for record, pair in zip(self.records, written):
                clean = load_wav(record.resolve_wav(self.manifest.parent))
                wav_r, wav_e = pair.resolve(out_dir)
                perturbed_r = load_wav(wav_r)
                perturbed_e = load_wav(wav_e)
                self.assertEqual(clean.samples.size, perturbed_r.samples.size)
                self.assertEqual(clean.samples.size, perturbed_e.samples.size)
                for factor in (pair.factor_R, pair.factor_E):
                    self.assertTrue(1 / 1.4 - 1e-9 <= factor <= 1.4)
                self.assertNotEqual(pair.factor_R, pair.factor_E)
        mock_log_debug.assert_any_call(
            f"Total utterances to perturb: {len(self.records)}"
        )

    def test_same_seed_same_factors(self):
        """Tests that the perturbation seed fixes the factors"""
        with tempfile.TemporaryDirectory() as tmp:
            spec = PerturbationSpec(seed=9)
            first = perturb_dual(self.manifest, spec, Path(tmp) / "a")
            second = perturb_dual(
                self.manifest, spec, Path(tmp) / "b", n_partitions=2
            )
        self.assertEqual(
            [(p.factor_R, p.factor_E) for p in first],
            [(p.factor_R, p.factor_E) for p in second],
        )

    def test_missing_manifest(self):
        """Tests that an absent manifest is reported as missing"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MissingArtifactError) as e:
                perturb_dual(
                    Path(tmp) / "manifest.tsv", PerturbationSpec(), Path(tmp)
                )
        self.assertIn("manifest", str(e.exception))

    def test_external_without_audio(self):
        """Tests the external strategy without anonymized audio"""
        spec = PerturbationSpec(
            strategy=PerturbationStrategy.EXTERNAL_ANONYMIZER
        )
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(PluginNotProvidedError):
                perturb_dual(self.manifest, spec, Path(tmp))

    def test_ingest_anonymized_audio(self):
        """Tests that externally anonymized files are paired"""
        with tempfile.TemporaryDirectory() as tmp:
            audio_dir = Path(tmp)
            spec = PerturbationSpec(
                strategy=PerturbationStrategy.EXTERNAL_ANONYMIZER,
                external_audio_dir=audio_dir,
            )
            with self.assertRaises(MissingArtifactError):
                ingest_anonymized_pairs(self.records[:1], spec)
            for record in self.records:
                for stream in (STREAM_R, STREAM_E):
                    (audio_dir / f"{record.utterance_id}_{stream}.wav").touch()
            pairs = PerturbCorpusJob(
                job_settings=JobSettings(
                    manifest_path=self.manifest,
                    output_directory=audio_dir / "out",
                    perturbation=spec,
                )
            ).run_job()
        self.assertEqual(len(self.records), len(pairs))
        self.assertTrue(all(math.isnan(p.factor_R) for p in pairs))
        self.assertTrue(pairs[0].wav_for_R.endswith("_R.wav"))


if __name__ == "__main__":
    unittest.main()
