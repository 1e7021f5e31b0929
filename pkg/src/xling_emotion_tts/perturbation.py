"""
Speaker perturbation of corpus audio: random formant-shift factors, the
per-file perturbation, the strategy interface with the external anonymizer
plug-in point, and the pair manifest linking each utterance to its two
independently perturbed copies.
"""

import logging
import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

from xling_emotion_tts.audio_dsp import (
    PitchTrack,
    Waveform,
    change_formant,
    extract_pitch,
    load_wav,
    save_wav,
)
from xling_emotion_tts.configs import (
    PerturbationSpec,
    PerturbationStrategy,
    PitchConfig,
)
from xling_emotion_tts.corpus import ManifestRecord, derive_rng
from xling_emotion_tts.exceptions import (
    MissingArtifactError,
    PluginNotProvidedError,
)

STREAM_R = "R"
STREAM_E = "E"
PAIR_FIELDS = 5


def factor_from_draws(magnitude: float, branch: float) -> float:
    """
    Formant factor from a magnitude draw and a branch draw: the magnitude
    when branch >= 0.5, otherwise its reciprocal.
    Parameters
    ----------
    magnitude : float
    branch : float

    Returns
    -------
    float

    """
    return magnitude if branch >= 0.5 else 1.0 / magnitude


def sample_factor(
    rng: np.random.Generator, spec: Optional[PerturbationSpec] = None
) -> float:
    """
    Draws a magnitude uniformly from [factor_low, factor_high], then a
    uniform branch deciding between the magnitude and its reciprocal.
    Parameters
    ----------
    rng : np.random.Generator
    spec : Optional[PerturbationSpec]

    Returns
    -------
    float
      In [1 / factor_high, factor_high]

    """
    spec = spec or PerturbationSpec()
    magnitude = float(rng.uniform(spec.factor_low, spec.factor_high))
    branch = float(rng.uniform(0.0, 1.0))
    return factor_from_draws(magnitude, branch)


def perturbation_rng(
    seed: int, utterance_id: str, stream: str, epoch: Optional[int] = None
) -> np.random.Generator:
    """
    Random stream of one utterance. The R and E streams, and each training
    epoch when re-perturbing, are independent.
    Parameters
    ----------
    seed : int
    utterance_id : str
    stream : str
    epoch : Optional[int]

    Returns
    -------
    np.random.Generator

    """
    keys = [utterance_id, f"perturb-{stream}"]
    if epoch is not None:
        keys.append(f"epoch-{epoch}")
    return derive_rng(seed, *keys)


class SpeakerPerturber(ABC):
    """Strategy turning a clean waveform into a speaker-perturbed one"""

    def __init__(
        self,
        spec: PerturbationSpec,
        pitch_config: Optional[PitchConfig] = None,
    ):
        """
        Class constructor for SpeakerPerturber.

        Parameters
        ----------
        spec : PerturbationSpec
        pitch_config : Optional[PitchConfig]
        """
        self.spec = spec
        self.pitch_config = pitch_config or PitchConfig()

    @abstractmethod
    def perturb(
        self,
        waveform: Waveform,
        rng: np.random.Generator,
        pitch: Optional[Tuple[PitchTrack, float]] = None,
    ) -> Tuple[Waveform, float]:
        """Returns the perturbed waveform and the factor applied (nan when
        the strategy has no factor)"""


class FormantShiftPerturber(SpeakerPerturber):
    """Random formant shift keeping pitch and duration"""

    def perturb(
        self,
        waveform: Waveform,
        rng: np.random.Generator,
        pitch: Optional[Tuple[PitchTrack, float]] = None,
    ) -> Tuple[Waveform, float]:
        """
        Samples a factor, extracts pitch and its median unless given, and
        shifts the formants.
        Parameters
        ----------
        waveform : Waveform
        rng : np.random.Generator
        pitch : Optional[Tuple[PitchTrack, float]]
          Precomputed (track, median) of the waveform

        Returns
        -------
        Tuple[Waveform, float]

        """
        factor = sample_factor(rng, self.spec)
        if pitch is None:
            pitch = extract_pitch(waveform, self.pitch_config)
        track, median_pitch = pitch
        shifted = change_formant(
            waveform,
            factor,
            median_pitch,
            pitch_track=track,
            pitch_config=self.pitch_config,
        )
        return shifted, factor


class ExternalAnonymizerPerturber(SpeakerPerturber):
    """Plug-in point for a pretrained speaker anonymizer. Anonymized audio
    produced elsewhere can be ingested with ingest_anonymized_pairs."""

    def perturb(
        self,
        waveform: Waveform,
        rng: np.random.Generator,
        pitch: Optional[Tuple[PitchTrack, float]] = None,
    ) -> Tuple[Waveform, float]:
        """Always raises PluginNotProvidedError"""
        raise PluginNotProvidedError(
            "Strategy 'external_anonymizer' needs an anonymizer plug-in, "
            "which is not provided. Supply anonymized audio through "
            "perturbation.external_audio_dir instead."
        )


def get_perturber(
    spec: PerturbationSpec, pitch_config: Optional[PitchConfig] = None
) -> SpeakerPerturber:
    """Strategy object for spec.strategy"""
    if spec.strategy == PerturbationStrategy.FORMANT_SHIFT:
        return FormantShiftPerturber(spec, pitch_config)
    return ExternalAnonymizerPerturber(spec, pitch_config)


def perturb_file(
    wav_path: Union[Path, str],
    spec: PerturbationSpec,
    rng: np.random.Generator,
    out_path: Union[Path, str],
    pitch_config: Optional[PitchConfig] = None,
) -> Path:
    """
    Perturbs one WAV file and saves the result.
    Parameters
    ----------
    wav_path : Union[Path, str]
    spec : PerturbationSpec
    rng : np.random.Generator
    out_path : Union[Path, str]
    pitch_config : Optional[PitchConfig]

    Returns
    -------
    Path
      out_path

    """
    perturber = get_perturber(spec, pitch_config)
    waveform = load_wav(wav_path)
    perturbed, factor = perturber.perturb(waveform, rng)
    logging.debug(f"Perturbed {wav_path} with factor {factor}")
    return save_wav(perturbed, out_path)


class PerturbedPair(BaseModel):
    """Two independently perturbed copies of one utterance; R-stream audio
    feeds the unit tokenizer and E-stream audio the emotion encoder"""

    source_id: str
    wav_for_R: str
    wav_for_E: str
    factor_R: float = math.nan
    factor_E: float = math.nan

    @model_validator(mode="after")
    def check_distinct(self):
        """Both copies differ from each other and from the source id"""
        if self.wav_for_R == self.wav_for_E:
            raise ValueError("wav_for_R and wav_for_E must differ")
        if self.source_id in (self.wav_for_R, self.wav_for_E):
            raise ValueError("perturbed paths must differ from the source")
        for value in (self.source_id, self.wav_for_R, self.wav_for_E):
            if not value or any(c in value for c in "\t\n\r"):
                raise ValueError(
                    "pair fields must be non-empty without tabs or newlines"
                )
        return self

    def resolve(self, pair_manifest_dir: Union[Path, str]) -> Tuple[Path, ...]:
        """Absolute paths (wav_for_R, wav_for_E)"""
        resolved = []
        for value in (self.wav_for_R, self.wav_for_E):
            path = Path(value)
            resolved.append(
                path if path.is_absolute() else Path(pair_manifest_dir) / path
            )
        return tuple(resolved)


def serialize_pairs(pairs: List[PerturbedPair]) -> str:
    """
    Pair manifest text: utterance_id, wav_for_R, wav_for_E, factor_R,
    factor_E per line, tab-separated. Factors are written with repr so they
    parse back exactly; missing factors are 'nan'.
    Parameters
    ----------
    pairs : List[PerturbedPair]

    Returns
    -------
    str

    """
    return "".join(
        f"{p.source_id}\t{p.wav_for_R}\t{p.wav_for_E}\t"
        f"{p.factor_R!r}\t{p.factor_E!r}\n"
        for p in pairs
    )


def parse_pairs(text: str) -> List[PerturbedPair]:
    """Inverse of serialize_pairs"""
    pairs = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != PAIR_FIELDS:
            raise ValueError(
                f"Pair manifest line {line_number}: expected {PAIR_FIELDS} "
                f"fields, found {len(fields)}"
            )
        try:
            pairs.append(
                PerturbedPair(
                    source_id=fields[0],
                    wav_for_R=fields[1],
                    wav_for_E=fields[2],
                    factor_R=float(fields[3]),
                    factor_E=float(fields[4]),
                )
            )
        except ValueError as e:
            raise ValueError(f"Pair manifest line {line_number}: {e}") from e
    return pairs


def read_pairs(path: Union[Path, str]) -> List[PerturbedPair]:
    """Reads a pair manifest"""
    return parse_pairs(Path(path).read_text(encoding="utf-8"))


def write_pairs(pairs: List[PerturbedPair], path: Union[Path, str]) -> Path:
    """Writes a pair manifest sorted by utterance id"""
    path = Path(path)
    ordered = sorted(pairs, key=lambda p: p.source_id)
    path.write_text(serialize_pairs(ordered), encoding="utf-8")
    return path


def ingest_anonymized_pairs(
    records: List[ManifestRecord], spec: PerturbationSpec
) -> List[PerturbedPair]:
    """
    Builds pairs from externally anonymized audio named
    {utterance_id}_R.wav and {utterance_id}_E.wav under
    spec.external_audio_dir.
    Parameters
    ----------
    records : List[ManifestRecord]
    spec : PerturbationSpec

    Returns
    -------
    List[PerturbedPair]
      Factors are nan

    """
    if spec.external_audio_dir is None:
        raise PluginNotProvidedError(
            "Strategy 'external_anonymizer' needs either an anonymizer "
            "plug-in or perturbation.external_audio_dir; neither is provided"
        )
    audio_dir = Path(spec.external_audio_dir)
    pairs = []
    for record in records:
        paths = []
        for stream in (STREAM_R, STREAM_E):
            path = audio_dir / f"{record.utterance_id}_{stream}.wav"
            if not path.is_file():
                raise MissingArtifactError(
                    f"anonymized audio for {record.utterance_id}", path
                )
            paths.append(path.resolve().as_posix())
        pairs.append(
            PerturbedPair(
                source_id=record.utterance_id,
                wav_for_R=paths[0],
                wav_for_E=paths[1],
            )
        )
    return pairs
