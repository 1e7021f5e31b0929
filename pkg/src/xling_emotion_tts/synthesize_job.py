"""
Module to synthesize speech in a target speaker's voice with the emotion of
a reference recording, using the trained txt2vec and vec2wav stages.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from time import time
from typing import List, Optional, Sequence

import numpy as np
from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.audio_dsp import (
    Waveform,
    load_wav,
    mel_spectrogram,
    save_wav,
)
from xling_emotion_tts.configs import GlobalConfig, MelConfig
from xling_emotion_tts.corpus import text_to_phonemes
from xling_emotion_tts.exceptions import (
    ConfigurationError,
    MissingArtifactError,
)
from xling_emotion_tts.ref_encoders import (
    ClassifierEncoder,
    embed,
    load_encoder,
)
from xling_emotion_tts.training import (
    load_txt2vec,
    load_vec2wav,
    verify_digests,
)
from xling_emotion_tts.txt2vec import Txt2Vec, Txt2VecPrediction
from xling_emotion_tts.vec2wav import Vec2Wav

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class Synthesizer:
    """Both trained stages plus the frozen encoders they were trained
    against"""

    def __init__(
        self,
        txt2vec: Txt2Vec,
        vec2wav: Vec2Wav,
        emotion_encoder: ClassifierEncoder,
        speaker_encoder: Optional[ClassifierEncoder],
        mel_config: MelConfig,
        sample_rate: int,
    ):
        """
        Class constructor for Synthesizer.

        Parameters
        ----------
        txt2vec : Txt2Vec
        vec2wav : Vec2Wav
        emotion_encoder : ClassifierEncoder
        speaker_encoder : Optional[ClassifierEncoder]
          Needed only when vec2wav uses external speaker embeddings
        mel_config : MelConfig
        sample_rate : int
        """
        self.txt2vec = txt2vec
        self.vec2wav = vec2wav
        self.emotion_encoder = emotion_encoder
        self.speaker_encoder = speaker_encoder
        self.mel_config = mel_config
        self.sample_rate = sample_rate

    @classmethod
    def from_artifacts(cls, config: GlobalConfig) -> "Synthesizer":
        """Loads the stage checkpoints and checks that the frozen artifacts
        they recorded are unchanged"""
        artifacts = config.artifacts
        required = {
            "txt2vec checkpoint": artifacts.txt2vec,
            "vec2wav checkpoint": artifacts.vec2wav,
            "emotion encoder": artifacts.emotion_encoder,
            "speaker encoder": artifacts.speaker_encoder,
        }
        for name, path in required.items():
            if not path.is_file():
                raise MissingArtifactError(name, path)
        txt2vec, txt2vec_meta = load_txt2vec(artifacts.txt2vec)
        vec2wav, vec2wav_meta = load_vec2wav(artifacts.vec2wav)
        verify_digests(txt2vec_meta, {"codebook": artifacts.codebook})
        verify_digests(
            vec2wav_meta,
            {
                "codebook": artifacts.codebook,
                "emotion_encoder": artifacts.emotion_encoder,
                "speaker_encoder": artifacts.speaker_encoder,
            },
        )
        return cls(
            txt2vec=txt2vec,
            vec2wav=vec2wav,
            emotion_encoder=load_encoder(
                artifacts.emotion_encoder, "emotion_encoder"
            ),
            speaker_encoder=load_encoder(
                artifacts.speaker_encoder, "speaker_encoder"
            ),
            mel_config=config.mel,
            sample_rate=config.sample_rate,
        )

    def predict_units(
        self,
        phoneme_ids: Sequence[int],
        language_id: int,
        emotion_reference: Waveform,
    ) -> Txt2VecPrediction:
        """Stage 1 only"""
        mel = mel_spectrogram(emotion_reference, self.mel_config)
        return self.txt2vec.infer(
            phoneme_ids, language_id, mel.frames, self.mel_config.hop
        )

    def synthesize(
        self,
        phoneme_ids: Sequence[int],
        language_id: int,
        emotion_reference: Waveform,
        speaker_id: Optional[int] = None,
        speaker_reference: Optional[Waveform] = None,
    ) -> Waveform:
        """
        Text to speech with the reference's emotion and the target voice.
        Parameters
        ----------
        phoneme_ids : Sequence[int]
        language_id : int
        emotion_reference : Waveform
        speaker_id : Optional[int]
          Target speaker in lookup mode
        speaker_reference : Optional[Waveform]
          Target speaker audio in external mode

        Returns
        -------
        Waveform

        """
        if emotion_reference.sample_rate != self.sample_rate:
            raise ConfigurationError(
                f"Emotion reference is {emotion_reference.sample_rate} Hz; "
                f"the models expect {self.sample_rate} Hz"
            )
        prediction = self.predict_units(
            phoneme_ids, language_id, emotion_reference
        )
        emotion = embed(emotion_reference, self.emotion_encoder).vector
        external = None
        if self.vec2wav.config.speaker_mode == "external":
            if speaker_reference is None or self.speaker_encoder is None:
                raise ConfigurationError(
                    "External speaker mode needs a speaker reference"
                )
            external = embed(speaker_reference, self.speaker_encoder).vector
        elif speaker_id is None:
            raise ConfigurationError("A target speaker id is required")
        return self.vec2wav.infer(
            prediction.units.units,
            emotion,
            prediction.pitch_frames,
            prediction.energy_frames,
            self.sample_rate,
            speaker_id=speaker_id,
            external_speaker=external,
        )


class JobSettings(BaseSettings):
    """Job settings for SynthesizeJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    config: GlobalConfig
    text: Optional[str] = Field(
        default=None, description="Text in the synthetic pseudo-language"
    )
    phonemes: Optional[List[int]] = Field(
        default=None, description="Phoneme ids, instead of text"
    )
    language_id: int = Field(default=0, ge=0)
    emotion_reference: Path = Field(..., description="Emotion reference WAV")
    speaker_id: Optional[int] = Field(default=None, ge=0)
    speaker_reference: Optional[Path] = Field(
        default=None, description="Speaker reference WAV (external mode)"
    )
    output_path: Optional[Path] = Field(
        default=None, description="Defaults to synth/synth.wav in workdir"
    )

    @model_validator(mode="after")
    def check_content(self):
        """Exactly one of text and phonemes"""
        if (self.text is None) == (self.phonemes is None):
            raise ValueError("Give exactly one of text and phonemes")
        return self


class SynthesizeJob:
    """Job to synthesize one utterance"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for SynthesizeJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings

    def _phoneme_ids(self) -> List[int]:
        """Phoneme ids from text or as given"""
        settings = self.job_settings
        if settings.phonemes is not None:
            return list(settings.phonemes)
        return text_to_phonemes(
            settings.text, settings.config.corpus.phoneme_vocab
        )

    def run_job(self) -> Path:
        """Main job runner. Writes the WAV and returns its path."""
        job_start_time = time()
        settings = self.job_settings
        if not settings.emotion_reference.is_file():
            raise MissingArtifactError(
                "emotion reference", settings.emotion_reference
            )
        synthesizer = Synthesizer.from_artifacts(settings.config)
        speaker_reference = (
            None
            if settings.speaker_reference is None
            else load_wav(settings.speaker_reference)
        )
        waveform = synthesizer.synthesize(
            self._phoneme_ids(),
            settings.language_id,
            load_wav(settings.emotion_reference),
            speaker_id=settings.speaker_id,
            speaker_reference=speaker_reference,
        )
        output_path = settings.output_path or (
            settings.config.artifacts.synth_dir / "synth.wav"
        )
        output_path.parent.mkdir(parents=True, exist_ok=True)
        save_wav(waveform, output_path)
        logging.info(
            f"Wrote {output_path} ({waveform.duration:.2f} s, peak "
            f"{np.max(np.abs(waveform.samples)):.3f})"
        )
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return output_path


if __name__ == "__main__":
    sys_args = sys.argv[1:]
    parser = argparse.ArgumentParser()
    parser.add_argument(
        "-j",
        "--job-settings",
        required=False,
        type=str,
        help=(
            r"""
            Instead of init args the job settings can optionally be passed in
            as a json string in the command line.
            """
        ),
    )
    cli_args = parser.parse_args(sys_args)
    main_job_settings = JobSettings.model_validate_json(cli_args.job_settings)
    main_job = SynthesizeJob(job_settings=main_job_settings)
    main_job.run_job()
