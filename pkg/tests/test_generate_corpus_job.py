"""Test module for classes and methods in generate_corpus_job"""

import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

from xling_emotion_tts.audio_dsp import load_wav
from xling_emotion_tts.configs import CorpusConfig
from xling_emotion_tts.corpus import read_manifest
from xling_emotion_tts.generate_corpus_job import (
    GenerateCorpusJob,
    JobSettings,
    generate_corpus,
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


class TestJobSettings(unittest.TestCase):
    """Tests for JobSettings class"""

    def test_class_constructor(self):
        """Tests that job settings can be constructed from serialized json."""
        job_settings = JobSettings(
            output_directory="corpus", corpus=TINY_CORPUS, seed=3
        )
        deserialized_settings = job_settings.model_validate_json(
            job_settings.model_dump_json()
        )
        self.assertEqual(job_settings, deserialized_settings)


class TestGenerateCorpusJob(unittest.TestCase):
    """Tests GenerateCorpusJob class"""

    @patch("logging.debug")
    def test_run_job(self, mock_log_debug: MagicMock):
        """Tests that every planned utterance is rendered and listed"""
        with tempfile.TemporaryDirectory() as tmp:
            job = GenerateCorpusJob(
                job_settings=JobSettings(
                    output_directory=Path(tmp), corpus=TINY_CORPUS, seed=3
                )
            )
            manifest_path = job.run_job()
            records = read_manifest(manifest_path)
            self.assertEqual(8, len(records))
            for record in records:
                waveform = load_wav(record.resolve_wav(manifest_path.parent))
                self.assertEqual(16000, waveform.sample_rate)
                self.assertEqual(
                    record.total_frames * 256, waveform.samples.size
                )
        mock_log_debug.assert_any_call("Total utterances to render: 8")

    def test_partitions_do_not_change_output(self):
        """Tests that one and two partitions write identical files"""
        with tempfile.TemporaryDirectory() as tmp:
            single = generate_corpus(TINY_CORPUS, Path(tmp) / "a", seed=5)
            double = generate_corpus(
                TINY_CORPUS, Path(tmp) / "b", seed=5, n_partitions=2
            )
            self.assertEqual(single.read_bytes(), double.read_bytes())
            for record in read_manifest(single):
                self.assertEqual(
                    record.resolve_wav(single.parent).read_bytes(),
                    record.resolve_wav(double.parent).read_bytes(),
                )

    def test_seed_changes_corpus(self):
        """Tests that a different seed plans a different corpus"""
        with tempfile.TemporaryDirectory() as tmp:
            first = generate_corpus(TINY_CORPUS, Path(tmp) / "a", seed=1)
            second = generate_corpus(TINY_CORPUS, Path(tmp) / "b", seed=2)
            self.assertNotEqual(first.read_bytes(), second.read_bytes())

    def test_unwritable_directory(self):
        """Tests that a directory that cannot be created is named"""
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "file"
            blocker.write_text("not a directory")
            job = GenerateCorpusJob(
                job_settings=JobSettings(
                    output_directory=blocker / "corpus", corpus=TINY_CORPUS
                )
            )
            with self.assertRaises(OSError) as e:
                job.run_job()
        self.assertIn("corpus", str(e.exception))


if __name__ == "__main__":
    unittest.main()
