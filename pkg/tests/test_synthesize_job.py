"""Test module for classes and methods in synthesize_job"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from xling_emotion_tts.audio_dsp import Waveform, save_wav
from xling_emotion_tts.configs import (
    EncoderConfig,
    GlobalConfig,
    MelConfig,
    Txt2VecConfig,
    Vec2WavConfig,
)
from xling_emotion_tts.exceptions import (
    ConfigurationError,
    MissingArtifactError,
)
from xling_emotion_tts.ref_encoders import ClassifierEncoder, freeze
from xling_emotion_tts.synthesize_job import (
    JobSettings,
    SynthesizeJob,
    Synthesizer,
)
from xling_emotion_tts.txt2vec import Txt2Vec, load_txt2vec_state
from xling_emotion_tts.vec2wav import Vec2Wav, load_vec2wav_state

SMALL_MEL = MelConfig(n_fft=256, win=256, hop=64, n_mels=16)
SMALL_ENCODER = EncoderConfig(channels=8, embed_dim=4, kernel_size=3)
SMALL_TXT2VEC = Txt2VecConfig(
    phoneme_vocab=10,
    d_model=16,
    n_heads=2,
    encoder_blocks=1,
    decoder_blocks=1,
    ff_dim=32,
    dropout=0.0,
    num_units=8,
    n_mels=16,
    style_kernel=3,
    variance_kernel=3,
)


def small_vec2wav_config(speaker_mode: str) -> Vec2WavConfig:
    """Vec2wav with a 64-sample hop"""
    return Vec2WavConfig(
        num_units=8,
        num_speakers=2,
        d_model=16,
        speaker_dim=8,
        emotion_dim=4,
        external_speaker_dim=4,
        decoder_blocks=1,
        kernel_size=3,
        upsample_rates=[8, 8],
        upsample_channels=16,
        speaker_mode=speaker_mode,
    )


def small_synthesizer(speaker_mode: str = "lookup") -> Synthesizer:
    """Synthesizer of untrained models marked as trained"""
    torch.manual_seed(0)
    vec2wav_config = small_vec2wav_config(speaker_mode)
    encoders = [
        freeze(ClassifierEncoder(2, SMALL_ENCODER, SMALL_MEL, 16000, field))
        for field in ("emotion_id", "speaker_id")
    ]
    return Synthesizer(
        txt2vec=load_txt2vec_state(
            SMALL_TXT2VEC, Txt2Vec(SMALL_TXT2VEC).state_dict(), trained=True
        ),
        vec2wav=load_vec2wav_state(
            vec2wav_config, Vec2Wav(vec2wav_config).state_dict(), trained=True
        ),
        emotion_encoder=encoders[0],
        speaker_encoder=encoders[1],
        mel_config=SMALL_MEL,
        sample_rate=16000,
    )


def tone(sample_rate: int = 16000) -> Waveform:
    """0.2 s sine at 220 Hz"""
    t = np.arange(int(0.2 * sample_rate)) / sample_rate
    return Waveform(
        samples=0.5 * np.sin(2 * np.pi * 220 * t), sample_rate=sample_rate
    )


class TestSynthesizer(unittest.TestCase):
    """Tests for Synthesizer"""

    def test_lookup_speaker(self):
        """Tests that one hop of audio is produced per predicted unit"""
        synthesizer = small_synthesizer()
        prediction = synthesizer.predict_units([1, 2, 3], 0, tone())
        waveform = synthesizer.synthesize([1, 2, 3], 0, tone(), speaker_id=1)
        self.assertEqual(16000, waveform.sample_rate)
        self.assertEqual(
            len(prediction.units) * 64, waveform.samples.size
        )
        self.assertLessEqual(float(np.max(np.abs(waveform.samples))), 1.0)

    def test_lookup_needs_speaker_id(self):
        """Tests that lookup mode requires a target speaker"""
        with self.assertRaises(ConfigurationError):
            small_synthesizer().synthesize([1, 2], 0, tone())

    def test_external_speaker(self):
        """Tests synthesis from a speaker reference recording"""
        synthesizer = small_synthesizer("external")
        with self.assertRaises(ConfigurationError):
            synthesizer.synthesize([1, 2], 1, tone(), speaker_id=0)
        waveform = synthesizer.synthesize(
            [1, 2], 1, tone(), speaker_reference=tone()
        )
        self.assertGreater(waveform.samples.size, 0)

    def test_sample_rate_mismatch(self):
        """Tests that references must match the model sample rate"""
        with self.assertRaises(ConfigurationError):
            small_synthesizer().synthesize(
                [1, 2], 0, tone(8000), speaker_id=0
            )


class TestSynthesizeJob(unittest.TestCase):
    """Tests SynthesizeJob class"""

    config = GlobalConfig(paths={"workdir": "work"})

    def test_class_constructor(self):
        """Tests that job settings can be constructed from serialized json."""
        job_settings = JobSettings(
            config=self.config,
            phonemes=[1, 2, 3],
            emotion_reference="ref.wav",
            speaker_id=0,
        )
        deserialized_settings = job_settings.model_validate_json(
            job_settings.model_dump_json()
        )
        self.assertEqual(job_settings, deserialized_settings)

    def test_exactly_one_of_text_and_phonemes(self):
        """Tests that text and phonemes are mutually exclusive"""
        with self.assertRaises(ValidationError):
            JobSettings(config=self.config, emotion_reference="ref.wav")
        with self.assertRaises(ValidationError):
            JobSettings(
                config=self.config,
                text="kalo",
                phonemes=[1],
                emotion_reference="ref.wav",
            )

    def test_missing_emotion_reference(self):
        """Tests that the reference recording must exist"""
        with tempfile.TemporaryDirectory() as tmp:
            job = SynthesizeJob(
                job_settings=JobSettings(
                    config=GlobalConfig(paths={"workdir": Path(tmp)}),
                    phonemes=[1, 2],
                    emotion_reference=Path(tmp) / "ref.wav",
                    speaker_id=0,
                )
            )
            with self.assertRaises(MissingArtifactError) as e:
                job.run_job()
        self.assertEqual("emotion reference", e.exception.artifact)

    def test_missing_checkpoints(self):
        """Tests that synthesis needs trained stages"""
        with tempfile.TemporaryDirectory() as tmp:
            reference = save_wav(tone(), Path(tmp) / "ref.wav")
            job = SynthesizeJob(
                job_settings=JobSettings(
                    config=GlobalConfig(paths={"workdir": Path(tmp)}),
                    phonemes=[1, 2],
                    emotion_reference=reference,
                    speaker_id=0,
                )
            )
            with self.assertRaises(MissingArtifactError) as e:
                job.run_job()
        self.assertEqual("txt2vec checkpoint", e.exception.artifact)


if __name__ == "__main__":
    unittest.main()
