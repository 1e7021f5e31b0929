"""
Module to render report.json files (this workdir's and any listed in the
evaluation config, e.g. ablation runs) as TSV and markdown tables. Only the
markdown table shows the wall-clock RTF read from timing.json files.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from time import time
from typing import Dict, List, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from xling_emotion_tts.configs import GlobalConfig
from xling_emotion_tts.evaluation import (
    EvalReport,
    MetricRow,
    ReportFormat,
    TimingRecord,
    attach_rtf,
    emit_report,
)
from xling_emotion_tts.exceptions import MissingArtifactError

# Set log level from env var
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
logging.basicConfig(level=LOG_LEVEL)

TIMING_FILE = "timing.json"


def read_report(path: Path) -> EvalReport:
    """Loads a report.json, naming the path when absent"""
    if not Path(path).is_file():
        raise MissingArtifactError("evaluation report", path)
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.model_validate(json.load(f))


def read_timings(report_paths: List[Path]) -> List[TimingRecord]:
    """Timing files stored next to the given reports, where present"""
    timings = []
    for report_path in report_paths:
        path = Path(report_path).with_name(TIMING_FILE)
        if path.is_file():
            with open(path, "r", encoding="utf-8") as f:
                timings.append(TimingRecord.model_validate(json.load(f)))
    return timings


def merge_rows(reports: List[EvalReport]) -> List[MetricRow]:
    """Union of rows; a later (system, group, language) replaces an
    earlier one"""
    merged: Dict[tuple, MetricRow] = {}
    for report in reports:
        for row in report.rows:
            merged[row.sort_key] = row
    return sorted(merged.values(), key=lambda r: r.sort_key)


class JobSettings(BaseSettings):
    """Job settings for ReportJob"""

    model_config = SettingsConfigDict(env_prefix="XET_")

    config: GlobalConfig
    output_directory: Optional[Path] = Field(
        default=None, description="Defaults to eval/ in workdir"
    )


class ReportJob:
    """Job to write report.tsv and report.md"""

    def __init__(self, job_settings: JobSettings):
        """
        Class constructor for ReportJob.
        Parameters
        ----------
        job_settings: JobSettings
        """
        self.job_settings = job_settings

    def run_job(self) -> Dict[str, Path]:
        """Main job runner. Returns the written paths by format."""
        job_start_time = time()
        config = self.job_settings.config
        artifacts = config.artifacts
        paths = [artifacts.eval_report_json] + list(
            config.evaluation.report_inputs
        )
        rows = merge_rows([read_report(path) for path in paths])
        output_directory = (
            self.job_settings.output_directory or artifacts.eval_dir
        )
        output_directory.mkdir(parents=True, exist_ok=True)
        written = {
            ReportFormat.TSV.value: emit_report(
                rows, ReportFormat.TSV, output_directory / "report.tsv"
            ),
            ReportFormat.MARKDOWN.value: emit_report(
                attach_rtf(rows, read_timings(paths)),
                ReportFormat.MARKDOWN,
                output_directory / "report.md",
            ),
        }
        logging.info(f"Wrote {len(rows)} rows to {output_directory}")
        job_end_time = time()
        execution_time = job_end_time - job_start_time
        logging.debug(f"Task took {execution_time} seconds")
        return written


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
    main_job = ReportJob(job_settings=main_job_settings)
    main_job.run_job()
