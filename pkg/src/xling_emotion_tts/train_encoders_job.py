"""
Module to train the frozen speaker and emotion reference encoders on the
training split of the clean corpus and report their held-out accuracy.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from time import time
from typing import Dict

import numpy as np
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.configs import EncoderConfig, MelConfig
from xling_emotion_tts.corpus import read_manifest, split_records
from xling_emotion_tts.exceptions import MissingArtifactError
from xling_emotion_tts.ref_encoders import (
    classify_mels,
    compute_mels,
    save_encoder,
    train_classifier_encoder,
)

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class JobSettings(BaseSettings):
    """Job settings for TrainEncodersJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    manifest_path: Path = Field(..., description="Clean corpus manifest")
    speaker_output_path: Path
    emotion_output_path: Path
    encoders: EncoderConfig = Field(default_factory=EncoderConfig)
    mel: MelConfig = Field(default_factory=MelConfig)
    sample_rate: int = Field(default=16000, ge=8000)
    holdout_every: int = Field(default=5, ge=2)
    seed: int = Field(default=0)


class TrainEncodersJob:
    """Job to train the speaker and emotion classifiers"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for TrainEncodersJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings

    def run_job(self) -> Dict[str, Dict[str, float]]:
        """Main job runner. Trains both encoders, writes their checkpoints
        and returns train and held-out accuracy per encoder."""
        job_start_time = time()
        settings = self.job_settings
        if not settings.manifest_path.is_file():
            raise MissingArtifactError("manifest", settings.manifest_path)
        records = read_manifest(settings.manifest_path)
        train_records, held_out = split_records(
            records, settings.holdout_every
        )
        mels = compute_mels(
            records, settings.manifest_path.parent, settings.mel
        )
        summary = {}
        outputs = {
            "speaker_id": settings.speaker_output_path,
            "emotion_id": settings.emotion_output_path,
        }
        for label_field, output_path in outputs.items():
            logging.debug(f"Training {label_field} encoder")
            trained = train_classifier_encoder(
                train_records,
                mels,
                label_field=label_field,
                config=settings.encoders,
                seed=settings.seed,
                mel_config=settings.mel,
                sample_rate=settings.sample_rate,
            )
            held_out_accuracy = float("nan")
            if held_out:
                predictions = classify_mels(
                    trained.encoder, [mels[r.utterance_id] for r in held_out]
                )
                truth = np.array([getattr(r, label_field) for r in held_out])
                held_out_accuracy = float(np.mean(predictions == truth))
            accuracy = {
                "train_accuracy": trained.train_accuracy,
                "held_out_accuracy": held_out_accuracy,
            }
            save_encoder(
                trained.encoder,
                output_path,
                seed=settings.seed,
                mel_config=settings.mel,
                sample_rate=settings.sample_rate,
                metadata=accuracy,
            )
            summary[trained.encoder.kind] = accuracy
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return summary


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
    main_job = TrainEncodersJob(job_settings=main_job_settings)
    main_job.run_job()
