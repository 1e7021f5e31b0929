"""
Module to render the synthetic corpus. Uses Dask to parallelize rendering
across utterances; the manifest is written once all WAV files exist.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from time import time
from typing import List, Tuple

from dask import bag as dask_bag
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.audio_dsp import save_wav
from xling_emotion_tts.configs import CorpusConfig
from xling_emotion_tts.corpus import (
    ManifestRecord,
    UtteranceSpec,
    default_emotions,
    default_speakers,
    plan_utterances,
    render_utterance,
    utterance_seed,
    write_manifest,
)

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class JobSettings(BaseSettings):
    """Job settings for GenerateCorpusJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    output_directory: Path = Field(
        ..., description="Directory receiving manifest.tsv and wavs/"
    )
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    seed: int = Field(default=0)
    sample_rate: int = Field(default=16000, ge=8000)
    n_partitions: int = Field(
        default=1, ge=1, description="Dask partitions for rendering"
    )


class GenerateCorpusJob:
    """Job to render every utterance of the synthetic corpus and write its
    manifest"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for GenerateCorpusJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings
        self.speakers = default_speakers(job_settings.corpus.num_speakers)
        self.emotions = default_emotions(job_settings.corpus.num_emotions)

    def _prepare_output_directory(self) -> Path:
        """Creates output_directory/wavs, naming the path on failure"""
        wav_dir = self.job_settings.output_directory / "wavs"
        try:
            wav_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(
                f"Unable to create corpus directory {wav_dir}: {e}"
            ) from e
        if not os.access(wav_dir, os.W_OK):
            raise PermissionError(f"Corpus directory {wav_dir} not writable")
        return wav_dir

    def _render_and_save(self, record: ManifestRecord, spec: UtteranceSpec):
        """Renders one utterance and writes its WAV file"""
        waveform = render_utterance(
            spec=spec,
            speaker=self.speakers[record.speaker_id],
            emotion=self.emotions[record.emotion_id],
            sample_rate=self.job_settings.sample_rate,
            seed=utterance_seed(self.job_settings.seed, record.utterance_id),
            hop=self.job_settings.corpus.hop,
        )
        out_path = self.job_settings.output_directory / record.wav_path
        try:
            save_wav(waveform, out_path)
        except (OSError, RuntimeError) as e:
            raise type(e)(f"{record.utterance_id}: {e}") from e

    def _dask_task_to_process_utterance_list(
        self, utterances: List[Tuple[ManifestRecord, UtteranceSpec]]
    ) -> List[str]:
        """
        Renders each utterance in a partition.
        Parameters
        ----------
        utterances : List[Tuple[ManifestRecord, UtteranceSpec]]

        Returns
        -------
        List[str]
          Ids of the rendered utterances

        """
        total_to_render = len(utterances)
        rendered = []
        for counter, (record, spec) in enumerate(utterances, start=1):
            logging.debug(
                f"Rendering {record.utterance_id}. "
                f"On {counter} of {total_to_render}"
            )
            self._render_and_save(record, spec)
            rendered.append(record.utterance_id)
        return rendered

    def _render_utterances(
        self, utterances: List[Tuple[ManifestRecord, UtteranceSpec]]
    ) -> List[str]:
        """Renders utterances in dask partitions"""
        utterance_bag = dask_bag.from_sequence(
            utterances, npartitions=self.job_settings.n_partitions
        )
        mapped_partitions = dask_bag.map_partitions(
            self._dask_task_to_process_utterance_list, utterance_bag
        )
        scheduler = (
            "synchronous" if self.job_settings.n_partitions == 1 else None
        )
        return mapped_partitions.compute(scheduler=scheduler)

    def run_job(self) -> Path:
        """Main job runner. Plans the corpus from the seed, renders all
        utterances and writes manifest.tsv. Returns the manifest path."""
        job_start_time = time()
        self._prepare_output_directory()
        utterances = plan_utterances(
            self.job_settings.corpus, self.job_settings.seed
        )
        logging.debug(f"Total utterances to render: {len(utterances)}")
        self._render_utterances(utterances)
        manifest_path = write_manifest(
            [record for record, _ in utterances],
            self.job_settings.output_directory / "manifest.tsv",
        )
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return manifest_path


def generate_corpus(
    config: CorpusConfig,
    out_dir: Path,
    seed: int,
    sample_rate: int = 16000,
    n_partitions: int = 1,
) -> Path:
    """
    Renders the corpus described by config into out_dir.
    Parameters
    ----------
    config : CorpusConfig
    out_dir : Path
    seed : int
    sample_rate : int
    n_partitions : int

    Returns
    -------
    Path
      Location of the manifest

    """
    job_settings = JobSettings(
        output_directory=out_dir,
        corpus=config,
        seed=seed,
        sample_rate=sample_rate,
        n_partitions=n_partitions,
    )
    return GenerateCorpusJob(job_settings=job_settings).run_job()


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
    main_job = GenerateCorpusJob(job_settings=main_job_settings)
    main_job.run_job()
