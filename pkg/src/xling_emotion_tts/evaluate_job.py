"""
Module to evaluate the trained system on held-out utterances. Each test
utterance serves as emotion reference for one same-speaker and one
cross-speaker synthesis; scoring is parallelized with Dask.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from time import time
from typing import Dict, List, Optional

from dask import bag as dask_bag
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.audio_dsp import Waveform, load_wav
from xling_emotion_tts.configs import GlobalConfig
from xling_emotion_tts.corpus import (
    ManifestRecord,
    read_manifest,
    split_records,
)
from xling_emotion_tts.evaluation import (
    EvalReport,
    MetricRow,
    SynthesisScore,
    TimingRecord,
    aggregate_scores,
    analyze_perturbation,
    classifier_accuracy,
    count_parameters,
    measure_rtf,
    score_synthesis,
    units_of,
)
from xling_emotion_tts.exceptions import (
    ConfigurationError,
    MissingArtifactError,
)
from xling_emotion_tts.perturbation import read_pairs
from xling_emotion_tts.ref_encoders import load_codebook
from xling_emotion_tts.synthesize_job import Synthesizer

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)

SAME = "same"
CROSS = "cross"


@dataclass
class EvalItem:
    """One synthesis to score"""

    reference: ManifestRecord
    target_speaker: int
    speaker_group: str
    speaker_reference: ManifestRecord


def plan_eval_items(
    test_records: List[ManifestRecord],
    train_records: List[ManifestRecord],
    num_speakers: int,
) -> List[EvalItem]:
    """
    A same-speaker and a cross-speaker item per test record. The cross
    target cycles through the other speakers. SECS is measured against a
    training utterance of the target speaker with the reference's emotion.
    Parameters
    ----------
    test_records : List[ManifestRecord]
    train_records : List[ManifestRecord]
    num_speakers : int

    Returns
    -------
    List[EvalItem]

    """
    prototypes: Dict[tuple, ManifestRecord] = {}
    for record in sorted(train_records, key=lambda r: r.utterance_id):
        prototypes.setdefault((record.speaker_id, record.emotion_id), record)
        prototypes.setdefault((record.speaker_id, None), record)
    items = []
    for index, record in enumerate(test_records):
        cross = (
            record.speaker_id + 1 + index % (num_speakers - 1)
        ) % num_speakers
        for group, target in ((SAME, record.speaker_id), (CROSS, cross)):
            speaker_reference = prototypes.get(
                (target, record.emotion_id), prototypes.get((target, None))
            )
            if speaker_reference is None:
                raise ConfigurationError(
                    f"No training utterance of speaker {target}"
                )
            items.append(
                EvalItem(
                    reference=record,
                    target_speaker=target,
                    speaker_group=group,
                    speaker_reference=speaker_reference,
                )
            )
    return items


class JobSettings(BaseSettings):
    """Job settings for EvaluateJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    config: GlobalConfig
    output_path: Optional[Path] = Field(
        default=None, description="Defaults to eval/report.json in workdir"
    )


class EvaluateJob:
    """Job to score synthesis and perturbation and write report.json"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for EvaluateJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings
        self.config = job_settings.config
        self.manifest_dir = self.config.artifacts.corpus_dir
        self.synthesizer: Optional[Synthesizer] = None
        self.codebook = None

    def _synthesize(self, item: EvalItem) -> Waveform:
        """Synthesizes the reference's text for the target speaker"""
        reference = item.reference
        return self.synthesizer.synthesize(
            reference.phoneme_ids,
            reference.language_id,
            load_wav(reference.resolve_wav(self.manifest_dir)),
            speaker_id=item.target_speaker,
            speaker_reference=load_wav(
                item.speaker_reference.resolve_wav(self.manifest_dir)
            ),
        )

    def _score_item(self, item: EvalItem) -> SynthesisScore:
        """Synthesizes and scores one item"""
        reference = item.reference
        emotion_reference = load_wav(
            reference.resolve_wav(self.manifest_dir)
        )
        return score_synthesis(
            utterance_id=reference.utterance_id,
            generated=self._synthesize(item),
            emotion_reference=emotion_reference,
            speaker_reference=load_wav(
                item.speaker_reference.resolve_wav(self.manifest_dir)
            ),
            reference_units=units_of(
                emotion_reference, self.codebook, self.config.mel
            ),
            target_speaker=item.target_speaker,
            reference_emotion=reference.emotion_id,
            speaker_group=item.speaker_group,
            language=f"lang{reference.language_id}",
            speaker_encoder=self.synthesizer.speaker_encoder,
            emotion_encoder=self.synthesizer.emotion_encoder,
            codebook=self.codebook,
            mel_config=self.config.mel,
        )

    def _dask_task_to_process_item_list(
        self, items: List[EvalItem]
    ) -> List[SynthesisScore]:
        """
        Scores each item in a partition.
        Parameters
        ----------
        items : List[EvalItem]

        Returns
        -------
        List[SynthesisScore]

        """
        total_to_score = len(items)
        scores = []
        for counter, item in enumerate(items, start=1):
            logging.debug(
                f"Scoring {item.reference.utterance_id} "
                f"({item.speaker_group}). On {counter} of {total_to_score}"
            )
            scores.append(self._score_item(item))
        return scores

    def _score_items(self, items: List[EvalItem]) -> List[SynthesisScore]:
        """Scores items in dask partitions"""
        n_partitions = self.config.num_workers
        item_bag = dask_bag.from_sequence(items, npartitions=n_partitions)
        mapped_partitions = dask_bag.map_partitions(
            self._dask_task_to_process_item_list, item_bag
        )
        scheduler = "synchronous" if n_partitions == 1 else None
        return mapped_partitions.compute(scheduler=scheduler)

    def _perturbation_rows(
        self, records: List[ManifestRecord], summary: Dict
    ) -> List[MetricRow]:
        """Perturbation analysis rows when the pair manifest exists"""
        artifacts = self.config.artifacts
        if not self.config.evaluation.analyze_perturbation:
            return []
        if not artifacts.pair_manifest.is_file():
            logging.warning(
                f"No pair manifest at {artifacts.pair_manifest}; skipping "
                "perturbation analysis"
            )
            return []
        analysis = analyze_perturbation(
            read_pairs(artifacts.pair_manifest),
            records,
            self.manifest_dir,
            artifacts.pair_manifest.parent,
            self.synthesizer.speaker_encoder,
            self.synthesizer.emotion_encoder,
            self.codebook,
            self.config.mel,
        )
        summary["perturbation"] = analysis.summary
        return analysis.rows

    def _write_timing(self, items: List[EvalItem], path: Path) -> None:
        """Times synthesis of items into a file next to the report. Fewer
        than 5 items leave no timing file."""
        path.unlink(missing_ok=True)
        if len(items) < 5:
            logging.warning(f"Too few items to measure RTF: {len(items)}")
            return
        measurement = measure_rtf(self._synthesize, items)
        timing = TimingRecord(
            system=self.config.evaluation.system_name,
            **measurement.model_dump(),
        )
        with open(path, "w", encoding="utf-8") as f:
            json.dump(timing.model_dump(mode="json"), f, indent=2)

    def run_job(self) -> EvalReport:
        """Main job runner. Returns the report, writes it as JSON and
        writes the RTF timing next to it."""
        job_start_time = time()
        config = self.config
        artifacts = config.artifacts
        if not artifacts.manifest.is_file():
            raise MissingArtifactError("manifest", artifacts.manifest)
        if not artifacts.codebook.is_file():
            raise MissingArtifactError("codebook", artifacts.codebook)
        self.synthesizer = Synthesizer.from_artifacts(config)
        self.codebook = load_codebook(artifacts.codebook)
        train_records, held_out = split_records(
            read_manifest(artifacts.manifest), config.corpus.holdout_every
        )
        test_records = held_out[: config.evaluation.num_test_utterances]
        items = plan_eval_items(
            test_records, train_records, config.corpus.num_speakers
        )
        logging.debug(f"Total items to score: {len(items)}")
        scores = self._score_items(items)
        summary = {
            **classifier_accuracy(scores),
            "txt2vec_parameters": count_parameters(self.synthesizer.txt2vec),
            "vec2wav_parameters": count_parameters(self.synthesizer.vec2wav),
        }
        rows = aggregate_scores(scores, config.evaluation.system_name)
        rows.extend(self._perturbation_rows(held_out, summary))
        report = EvalReport(
            rows=rows,
            config=config.model_dump(mode="json"),
            corpus_ids=[r.utterance_id for r in test_records],
            summary=summary,
        )
        output_path = self.job_settings.output_path or (
            artifacts.eval_report_json
        )
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(report.model_dump(mode="json"), f, indent=2)
        self._write_timing(
            items[: config.evaluation.rtf_utterances],
            output_path.with_name(artifacts.eval_timing_json.name),
        )
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return report


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
    main_job = EvaluateJob(job_settings=main_job_settings)
    main_job.run_job()
