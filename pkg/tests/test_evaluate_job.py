"""Test module for classes and methods in evaluate_job"""

import tempfile
import unittest
from pathlib import Path

from xling_emotion_tts.configs import GlobalConfig
from xling_emotion_tts.corpus import ManifestRecord
from xling_emotion_tts.evaluate_job import (
    CROSS,
    SAME,
    EvaluateJob,
    JobSettings,
    plan_eval_items,
)
from xling_emotion_tts.exceptions import (
    ConfigurationError,
    MissingArtifactError,
)


def record(uid: str, speaker: int, emotion: int) -> ManifestRecord:
    """Manifest record with a two-phoneme utterance"""
    return ManifestRecord(
        utterance_id=uid,
        wav_path=f"wavs/{uid}.wav",
        speaker_id=speaker,
        emotion_id=emotion,
        language_id=speaker % 2,
        phoneme_ids=[1, 2],
        durations=[6, 6],
    )


class TestPlanEvalItems(unittest.TestCase):
    """Tests for plan_eval_items"""

    train = [
        record("s0_e0_a", 0, 0),
        record("s0_e1_a", 0, 1),
        record("s1_e1_a", 1, 1),
        record("s2_e0_a", 2, 0),
        record("s2_e0_b", 2, 0),
    ]

    def test_same_and_cross_items(self):
        """Tests one same-speaker and one cross-speaker item per record"""
        test = [
            record("s0_e0_t", 0, 0),
            record("s1_e1_t", 1, 1),
            record("s2_e0_t", 2, 0),
        ]
        items = plan_eval_items(test, self.train, 3)
        self.assertEqual(6, len(items))
        self.assertEqual([SAME, CROSS] * 3, [i.speaker_group for i in items])
        self.assertEqual(
            [0, 1, 1, 0, 2, 0], [i.target_speaker for i in items]
        )
        for item in items:
            self.assertEqual(
                item.target_speaker, item.speaker_reference.speaker_id
            )

    def test_speaker_reference_prefers_matching_emotion(self):
        """Tests the emotion-matched prototype and the fallback"""
        items = plan_eval_items([record("s0_e0_t", 0, 0)], self.train, 3)
        self.assertEqual("s0_e0_a", items[0].speaker_reference.utterance_id)
        self.assertEqual("s1_e1_a", items[1].speaker_reference.utterance_id)
        items = plan_eval_items([record("s2_e0_t", 2, 0)], self.train, 3)
        self.assertEqual("s2_e0_a", items[0].speaker_reference.utterance_id)

    def test_unknown_target_speaker(self):
        """Tests that every target needs a training utterance"""
        with self.assertRaises(ConfigurationError):
            plan_eval_items([record("s2_e0_t", 2, 0)], self.train, 4)


class TestEvaluateJob(unittest.TestCase):
    """Tests EvaluateJob class"""

    def test_class_constructor(self):
        """Tests that job settings can be constructed from serialized json."""
        job_settings = JobSettings(
            config=GlobalConfig(paths={"workdir": "work"})
        )
        deserialized_settings = job_settings.model_validate_json(
            job_settings.model_dump_json()
        )
        self.assertEqual(job_settings, deserialized_settings)

    def test_missing_manifest(self):
        """Tests that evaluation needs the corpus"""
        with tempfile.TemporaryDirectory() as tmp:
            config = GlobalConfig(paths={"workdir": Path(tmp)})
            job = EvaluateJob(job_settings=JobSettings(config=config))
            with self.assertRaises(MissingArtifactError) as e:
                job.run_job()
        self.assertIn("manifest", str(e.exception))


if __name__ == "__main__":
    unittest.main()
