"""
Command-line entry point. Every subcommand reads one GlobalConfig JSON file;
only the seed and the workdir can be overridden by flags. The resolved
configuration is echoed on standard error. Exit codes: 0 success, 1
runtime failure, 2 configuration error, 3 missing prerequisite artifact.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError

from xling_emotion_tts import __version__
from xling_emotion_tts.configs import GlobalConfig, load_global_config
from xling_emotion_tts.evaluate_job import EvaluateJob
from xling_emotion_tts.evaluate_job import JobSettings as EvaluateSettings
from xling_emotion_tts.exceptions import (
    ConfigurationError,
    MissingArtifactError,
)
from xling_emotion_tts.fit_codebook_job import FitCodebookJob
from xling_emotion_tts.fit_codebook_job import (
    JobSettings as FitCodebookSettings,
)
from xling_emotion_tts.generate_corpus_job import generate_corpus
from xling_emotion_tts.perturb_corpus_job import perturb_dual
from xling_emotion_tts.report_job import JobSettings as ReportSettings
from xling_emotion_tts.report_job import ReportJob
from xling_emotion_tts.synthesize_job import JobSettings as SynthesizeSettings
from xling_emotion_tts.synthesize_job import SynthesizeJob
from xling_emotion_tts.train_encoders_job import (
    JobSettings as TrainEncodersSettings,
)
from xling_emotion_tts.train_encoders_job import TrainEncodersJob
from xling_emotion_tts.train_stage_job import JobSettings as TrainStageSettings
from xling_emotion_tts.train_stage_job import TrainStageJob

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3

SUBCOMMANDS = (
    "gen-corpus",
    "perturb",
    "fit-codebook",
    "train-encoders",
    "train-txt2vec",
    "train-vec2wav",
    "synth",
    "eval",
    "report",
)


def _phoneme_list(value: str) -> List[int]:
    """Comma-separated phoneme ids"""
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"phonemes must be comma-separated integers: {value}"
        ) from e


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per pipeline step"""
    parser = argparse.ArgumentParser(
        prog="xling-emotion-tts",
        description="Cross-lingual emotional TTS pipeline",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-c", "--config", required=True, type=Path, help="GlobalConfig JSON"
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="Override every seed"
    )
    parser.add_argument(
        "--workdir", type=Path, default=None, help="Override paths.workdir"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        subparser = subparsers.add_parser(name)
        if name.startswith("train-") and name != "train-encoders":
            subparser.add_argument(
                "--no-resume",
                action="store_true",
                help="Ignore an existing checkpoint and start over",
            )
    synth = subparsers.choices["synth"]
    content = synth.add_mutually_exclusive_group(required=True)
    content.add_argument("--text", type=str)
    content.add_argument("--phonemes", type=_phoneme_list)
    synth.add_argument("--language-id", type=int, default=0)
    synth.add_argument("--emotion-ref", type=Path, required=True)
    synth.add_argument("--speaker-id", type=int, default=None)
    synth.add_argument("--speaker-ref", type=Path, default=None)
    synth.add_argument("--out", type=Path, default=None)
    return parser


def _gen_corpus(config: GlobalConfig, args: argparse.Namespace):
    """gen-corpus"""
    return generate_corpus(
        config.corpus,
        config.artifacts.corpus_dir,
        config.seed,
        sample_rate=config.sample_rate,
        n_partitions=config.num_workers,
    )


def _perturb(config: GlobalConfig, args: argparse.Namespace):
    """perturb"""
    return perturb_dual(
        config.artifacts.manifest,
        config.perturbation,
        config.artifacts.perturbed_dir,
        pitch_config=config.pitch,
        n_partitions=config.num_workers,
    )


def _fit_codebook(config: GlobalConfig, args: argparse.Namespace):
    """fit-codebook"""
    settings = FitCodebookSettings(
        manifest_path=config.artifacts.manifest,
        output_path=config.artifacts.codebook,
        codebook=config.codebook,
        mel=config.mel,
        holdout_every=config.corpus.holdout_every,
        seed=config.seed,
    )
    return FitCodebookJob(job_settings=settings).run_job()


def _train_encoders(config: GlobalConfig, args: argparse.Namespace):
    """train-encoders"""
    settings = TrainEncodersSettings(
        manifest_path=config.artifacts.manifest,
        speaker_output_path=config.artifacts.speaker_encoder,
        emotion_output_path=config.artifacts.emotion_encoder,
        encoders=config.encoders,
        mel=config.mel,
        sample_rate=config.sample_rate,
        holdout_every=config.corpus.holdout_every,
        seed=config.seed,
    )
    return TrainEncodersJob(job_settings=settings).run_job()


def _train_stage(stage: str) -> Callable:
    """train-txt2vec / train-vec2wav"""

    def run(config: GlobalConfig, args: argparse.Namespace):
        """Runs TrainStageJob for one stage"""
        settings = TrainStageSettings(
            config=config, stage=stage, resume=not args.no_resume
        )
        return TrainStageJob(job_settings=settings).run_job()

    return run


def _synth(config: GlobalConfig, args: argparse.Namespace):
    """synth"""
    settings = SynthesizeSettings(
        config=config,
        text=args.text,
        phonemes=args.phonemes,
        language_id=args.language_id,
        emotion_reference=args.emotion_ref,
        speaker_id=args.speaker_id,
        speaker_reference=args.speaker_ref,
        output_path=args.out,
    )
    return SynthesizeJob(job_settings=settings).run_job()


def _evaluate(config: GlobalConfig, args: argparse.Namespace):
    """eval"""
    return EvaluateJob(job_settings=EvaluateSettings(config=config)).run_job()


def _report(config: GlobalConfig, args: argparse.Namespace):
    """report"""
    return ReportJob(job_settings=ReportSettings(config=config)).run_job()


COMMANDS: Dict[str, Callable] = {
    "gen-corpus": _gen_corpus,
    "perturb": _perturb,
    "fit-codebook": _fit_codebook,
    "train-encoders": _train_encoders,
    "train-txt2vec": _train_stage("txt2vec"),
    "train-vec2wav": _train_stage("vec2wav"),
    "synth": _synth,
    "eval": _evaluate,
    "report": _report,
}


def echo_config(config: GlobalConfig, command: str) -> None:
    """Writes the resolved configuration and seed to standard error"""
    echo = {
        "command": command,
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
    }
    print(json.dumps(echo, sort_keys=True), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parses arguments, runs one subcommand and maps failures to exit codes.
    Parameters
    ----------
    argv : Optional[List[str]]
      Defaults to sys.argv[1:]

    Returns
    -------
    int
      Exit code

    """
    args = build_parser().parse_args(argv)
    try:
        config = load_global_config(args.config, args.seed, args.workdir)
        echo_config(config, args.command)
        config.paths.workdir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, args)
    except (ValidationError, ConfigurationError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"Missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except Exception as e:
        logging.exception(f"{args.command} failed")
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
