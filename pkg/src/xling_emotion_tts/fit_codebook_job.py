"""
Module to fit the k-means unit codebook on log-mel frames of the training
split of the clean corpus.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from time import time

import numpy as np
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.configs import CodebookConfig, MelConfig
from xling_emotion_tts.corpus import read_manifest, split_records
from xling_emotion_tts.exceptions import MissingArtifactError
from xling_emotion_tts.ref_encoders import (
    UnitCodebook,
    compute_mels,
    fit_codebook,
    save_codebook,
)

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class JobSettings(BaseSettings):
    """Job settings for FitCodebookJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    manifest_path: Path = Field(..., description="Clean corpus manifest")
    output_path: Path = Field(..., description="Codebook checkpoint to write")
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    mel: MelConfig = Field(default_factory=MelConfig)
    holdout_every: int = Field(default=5, ge=2)
    seed: int = Field(default=0)


class FitCodebookJob:
    """Job to fit and save the unit codebook"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for FitCodebookJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings

    def _collect_frames(self) -> np.ndarray:
        """
        Mel frames of the training split, subsampled to at most
        codebook.max_frames rows with a seeded draw.
        Returns
        -------
        np.ndarray

        """
        settings = self.job_settings
        records = read_manifest(settings.manifest_path)
        train_records, _ = split_records(records, settings.holdout_every)
        mels = compute_mels(
            train_records, settings.manifest_path.parent, settings.mel
        )
        frames = np.concatenate(
            [mels[r.utterance_id] for r in train_records], axis=0
        )
        max_frames = settings.codebook.max_frames
        if frames.shape[0] > max_frames:
            rng = np.random.default_rng(settings.seed)
            keep = np.sort(
                rng.choice(frames.shape[0], size=max_frames, replace=False)
            )
            frames = frames[keep]
        return frames

    def run_job(self) -> UnitCodebook:
        """Main job runner. Fits the codebook and writes its checkpoint."""
        job_start_time = time()
        settings = self.job_settings
        if not settings.manifest_path.is_file():
            raise MissingArtifactError("manifest", settings.manifest_path)
        frames = self._collect_frames()
        logging.debug(f"Fitting codebook on {frames.shape[0]} frames")
        codebook = fit_codebook(
            frames,
            num_units=settings.codebook.num_units,
            seed=settings.seed,
            max_iter=settings.codebook.max_iter,
            n_init=settings.codebook.n_init,
        )
        save_codebook(
            codebook,
            settings.output_path,
            seed=settings.seed,
            config={
                "codebook": settings.codebook.model_dump(mode="json"),
                "mel": settings.mel.model_dump(mode="json"),
            },
        )
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return codebook


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
    main_job = FitCodebookJob(job_settings=main_job_settings)
    main_job.run_job()
