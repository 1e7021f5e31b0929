"""
Module to train one of the two synthesis stages from the artifacts of the
earlier pipeline steps.
"""

import argparse
import logging
import os
import sys
from time import time
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.configs import GlobalConfig
from xling_emotion_tts.training import TrainResult, train_stage

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class JobSettings(BaseSettings):
    """Job settings for TrainStageJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    config: GlobalConfig = Field(..., description="Pipeline configuration")
    stage: Literal["txt2vec", "vec2wav"]
    resume: bool = Field(
        default=True,
        description="Continue from a checkpoint of the same configuration",
    )
    stop_after: Optional[int] = Field(
        default=None, ge=1, description="Interrupt after this many steps"
    )


class TrainStageJob:
    """Job to train txt2vec or vec2wav"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for TrainStageJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings

    def run_job(self) -> TrainResult:
        """Main job runner. Writes the stage checkpoint and RunLog."""
        job_start_time = time()
        settings = self.job_settings
        result = train_stage(
            settings.config,
            settings.stage,
            resume=settings.resume,
            stop_after=settings.stop_after,
        )
        logging.info(
            f"{settings.stage}: {result.steps_completed} steps, final loss "
            f"{result.final_loss:.4f}"
        )
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return result


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
    main_job = TrainStageJob(job_settings=main_job_settings)
    main_job.run_job()
