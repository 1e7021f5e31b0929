"""
Module to build the perturbed corpus used to train vec2wav. Every
utterance receives two independently sampled perturbations, one for the
unit stream and one for the emotion stream. Uses Dask to parallelize
across utterances; the pair manifest is written by this process only.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from time import time
from typing import List

from dask import bag as dask_bag
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.audio_dsp import extract_pitch, load_wav, save_wav
from xling_emotion_tts.configs import (
    PerturbationSpec,
    PerturbationStrategy,
    PitchConfig,
)
from xling_emotion_tts.corpus import ManifestRecord, read_manifest
from xling_emotion_tts.exceptions import MissingArtifactError
from xling_emotion_tts.perturbation import (
    STREAM_E,
    STREAM_R,
    PerturbedPair,
    get_perturber,
    ingest_anonymized_pairs,
    perturbation_rng,
    write_pairs,
)

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)


class JobSettings(BaseSettings):
    """Job settings for PerturbCorpusJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    manifest_path: Path = Field(..., description="Clean corpus manifest")
    output_directory: Path = Field(
        ..., description="Directory receiving pairs.tsv and wavs/"
    )
    perturbation: PerturbationSpec = Field(default_factory=PerturbationSpec)
    pitch: PitchConfig = Field(default_factory=PitchConfig)
    n_partitions: int = Field(default=1, ge=1)


class PerturbCorpusJob:
    """Job to write two perturbed copies of every corpus utterance"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for PerturbCorpusJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings
        self.perturber = get_perturber(
            job_settings.perturbation, job_settings.pitch
        )

    def _perturb_record(self, record: ManifestRecord) -> PerturbedPair:
        """
        Loads one utterance, extracts its pitch once, and writes the R and E
        perturbations.
        Parameters
        ----------
        record : ManifestRecord

        Returns
        -------
        PerturbedPair

        """
        settings = self.job_settings
        source = record.resolve_wav(settings.manifest_path.parent)
        try:
            waveform = load_wav(source)
            pitch = extract_pitch(waveform, settings.pitch)
            relative_paths, factors = [], []
            for stream in (STREAM_R, STREAM_E):
                rng = perturbation_rng(
                    settings.perturbation.seed, record.utterance_id, stream
                )
                perturbed, factor = self.perturber.perturb(
                    waveform, rng, pitch
                )
                relative = f"wavs/{record.utterance_id}_{stream}.wav"
                save_wav(perturbed, settings.output_directory / relative)
                relative_paths.append(relative)
                factors.append(factor)
        except (OSError, RuntimeError) as e:
            raise type(e)(f"{record.utterance_id}: {e}") from e
        return PerturbedPair(
            source_id=record.utterance_id,
            wav_for_R=relative_paths[0],
            wav_for_E=relative_paths[1],
            factor_R=factors[0],
            factor_E=factors[1],
        )

    def _dask_task_to_process_record_list(
        self, records: List[ManifestRecord]
    ) -> List[PerturbedPair]:
        """
        Perturbs each record in a partition.
        Parameters
        ----------
        records : List[ManifestRecord]

        Returns
        -------
        List[PerturbedPair]

        """
        total_to_perturb = len(records)
        pairs = []
        for counter, record in enumerate(records, start=1):
            logging.debug(
                f"Perturbing {record.utterance_id}. "
                f"On {counter} of {total_to_perturb}"
            )
            pairs.append(self._perturb_record(record))
        return pairs

    def _perturb_records(
        self, records: List[ManifestRecord]
    ) -> List[PerturbedPair]:
        """Perturbs records in dask partitions"""
        record_bag = dask_bag.from_sequence(
            records, npartitions=self.job_settings.n_partitions
        )
        mapped_partitions = dask_bag.map_partitions(
            self._dask_task_to_process_record_list, record_bag
        )
        scheduler = (
            "synchronous" if self.job_settings.n_partitions == 1 else None
        )
        return list(mapped_partitions.compute(scheduler=scheduler))

    def run_job(self) -> List[PerturbedPair]:
        """Main job runner. Reads the manifest, perturbs (or ingests) every
        utterance and writes pairs.tsv."""
        job_start_time = time()
        settings = self.job_settings
        if not settings.manifest_path.is_file():
            raise MissingArtifactError("manifest", settings.manifest_path)
        records = read_manifest(settings.manifest_path)
        logging.debug(f"Total utterances to perturb: {len(records)}")
        (settings.output_directory / "wavs").mkdir(parents=True, exist_ok=True)
        if (
            settings.perturbation.strategy
            == PerturbationStrategy.EXTERNAL_ANONYMIZER
        ):
            pairs = ingest_anonymized_pairs(records, settings.perturbation)
        else:
            pairs = self._perturb_records(records)
        write_pairs(pairs, settings.output_directory / "pairs.tsv")
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return sorted(pairs, key=lambda p: p.source_id)


def perturb_dual(
    manifest: Path,
    spec: PerturbationSpec,
    out_dir: Path,
    pitch_config: PitchConfig = PitchConfig(),
    n_partitions: int = 1,
) -> List[PerturbedPair]:
    """
    Writes two independent perturbations of every utterance in manifest
    plus out_dir/pairs.tsv.
    Parameters
    ----------
    manifest : Path
    spec : PerturbationSpec
    out_dir : Path
    pitch_config : PitchConfig
    n_partitions : int

    Returns
    -------
    List[PerturbedPair]

    """
    job_settings = JobSettings(
        manifest_path=manifest,
        output_directory=out_dir,
        perturbation=spec,
        pitch=pitch_config,
        n_partitions=n_partitions,
    )
    return PerturbCorpusJob(job_settings=job_settings).run_job()


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
    main_job = PerturbCorpusJob(job_settings=main_job_settings)
    main_job.run_job()
