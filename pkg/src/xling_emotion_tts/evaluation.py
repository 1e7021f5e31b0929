"""
Objective evaluation: embedding cosine similarities (SECS, EECS), the unit
error rate used as a content proxy, real-time factor, and report tables
with one row per system, speaker group and language.
"""

import logging
import os
import platform
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from xling_emotion_tts.audio_dsp import Waveform, load_wav, mel_spectrogram
from xling_emotion_tts.configs import MelConfig
from xling_emotion_tts.corpus import ManifestRecord
from xling_emotion_tts.perturbation import PerturbedPair
from xling_emotion_tts.ref_encoders import (
    ClassifierEncoder,
    UnitCodebook,
    embed,
    encode_units,
    predict_label,
)

REPORT_COLUMNS = (
    "system",
    "speaker_group",
    "language",
    "SECS",
    "EECS",
    "UER (%)",
    "UTMOS",
    "RTF",
)
ORIGINAL_AUDIO = "Original audio"
FORMANT_SHIFT = "Formant shift"
SPEAKER_ANONYMIZATION = "Speaker anonymization"
NO_GROUP = "-"


class ReportFormat(str, Enum):
    """Report file formats"""

    TSV = "tsv"
    MARKDOWN = "markdown"


class MetricRow(BaseModel):
    """One table row. uer is a fraction; tables show it as a percentage."""

    system: str
    speaker_group: str = Field(default=NO_GROUP)
    language: str = Field(default=NO_GROUP)
    secs: float = Field(..., ge=-1.0, le=1.0)
    eecs: float = Field(..., ge=-1.0, le=1.0)
    uer: float = Field(..., ge=0.0)
    utmos_proxy: Optional[float] = Field(default=None)
    rtf: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def check_cells(self):
        """Text cells must not break the table layouts"""
        for value in (self.system, self.speaker_group, self.language):
            if not value or any(c in value for c in "\t\n\r|"):
                raise ValueError(
                    "system, speaker_group and language must be non-empty "
                    "without tabs, newlines or pipes"
                )
        return self

    @property
    def sort_key(self) -> Tuple[str, str, str]:
        """(system, speaker_group, language)"""
        return self.system, self.speaker_group, self.language


class EvalReport(BaseModel):
    """Rows plus the context they were measured in"""

    rows: List[MetricRow] = Field(default=[])
    config: Dict[str, Any] = Field(default={})
    corpus_ids: List[str] = Field(
        default=[], description="Utterance ids of the test set"
    )
    summary: Dict[str, Any] = Field(
        default={},
        description=(
            "Classifier accuracies, parameter counts, perturbation "
            "analysis"
        ),
    )

    @model_validator(mode="after")
    def sort_rows(self):
        """Rows ordered by system, then group, then language"""
        self.rows = sorted(self.rows, key=lambda r: r.sort_key)
        return self


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors, clipped to [-1, 1]"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def _embedding_cosine(
    wav_a: Waveform,
    wav_b: Waveform,
    encoder: ClassifierEncoder,
    label_field: str,
) -> float:
    """Cosine of the encoder embeddings of two waveforms"""
    if encoder.label_field != label_field:
        raise ValueError(
            f"Expected a {label_field} encoder, got {encoder.label_field}"
        )
    min_samples = encoder.front_end.mel_config.n_fft
    for name, wav in (("first", wav_a), ("second", wav_b)):
        if wav.samples.size < min_samples:
            raise ValueError(
                f"The {name} waveform has {wav.samples.size} samples; at "
                f"least {min_samples} are needed"
            )
    return cosine_similarity(
        embed(wav_a, encoder).vector, embed(wav_b, encoder).vector
    )


def secs(
    wav_a: Waveform, wav_b: Waveform, speaker_encoder: ClassifierEncoder
) -> float:
    """Speaker embedding cosine similarity"""
    return _embedding_cosine(wav_a, wav_b, speaker_encoder, "speaker_id")


def eecs(
    wav_a: Waveform, wav_b: Waveform, emotion_encoder: ClassifierEncoder
) -> float:
    """Emotion embedding cosine similarity"""
    return _embedding_cosine(wav_a, wav_b, emotion_encoder, "emotion_id")


def edit_distance(predicted: Sequence[int], reference: Sequence[int]) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion
    costs"""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    previous = np.arange(reference.size + 1)
    for i in range(1, predicted.size + 1):
        current = np.empty_like(previous)
        current[0] = i
        substitution = previous[:-1] + (reference != predicted[i - 1])
        deletion = previous[1:] + 1
        best = np.minimum(substitution, deletion)
        # Insertions chain along the row
        for j in range(1, reference.size + 1):
            current[j] = min(best[j - 1], current[j - 1] + 1)
        previous = current
    return int(previous[-1])


def unit_error_rate(
    predicted_units: Sequence[int], reference_units: Sequence[int]
) -> float:
    """
    Edit distance normalized by the reference length.
    Parameters
    ----------
    predicted_units : Sequence[int]
    reference_units : Sequence[int]

    Returns
    -------
    float

    """
    if len(reference_units) == 0:
        raise ValueError("Reference unit sequence is empty")
    return edit_distance(predicted_units, reference_units) / len(
        reference_units
    )


class RtfMeasurement(BaseModel):
    """Real-time factor with the timing it came from"""

    rtf: float = Field(..., ge=0.0)
    synthesis_seconds: float = Field(..., ge=0.0)
    audio_seconds: float = Field(..., gt=0.0)
    utterances: int = Field(..., ge=1)
    hardware: Dict[str, Any]


class TimingRecord(RtfMeasurement):
    """Wall-clock measurement of one system. Lives in timing.json, never in
    report.json."""

    system: str


def hardware_descriptor() -> Dict[str, Any]:
    """Machine the timing ran on"""
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": platform.system(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
        "torch_threads": torch.get_num_threads(),
    }


def measure_rtf(
    synthesize_fn: Callable[[Any], Waveform], utterances: Sequence[Any]
) -> RtfMeasurement:
    """
    Total synthesis wall-clock over total generated audio duration.
    Parameters
    ----------
    synthesize_fn : Callable[[Any], Waveform]
    utterances : Sequence[Any]
      At least 5 inputs for synthesize_fn

    Returns
    -------
    RtfMeasurement

    """
    if len(utterances) < 5:
        raise ValueError(
            f"RTF needs at least 5 utterances, got {len(utterances)}"
        )
    elapsed = 0.0
    audio_seconds = 0.0
    for utterance in utterances:
        start = perf_counter()
        waveform = synthesize_fn(utterance)
        elapsed += perf_counter() - start
        audio_seconds += waveform.duration
    return RtfMeasurement(
        rtf=elapsed / audio_seconds,
        synthesis_seconds=elapsed,
        audio_seconds=audio_seconds,
        utterances=len(utterances),
        hardware=hardware_descriptor(),
    )


def attach_rtf(
    rows: Sequence[MetricRow], timings: Sequence[TimingRecord]
) -> List[MetricRow]:
    """Copies of rows with the RTF of their system filled in"""
    rtf_by_system = {timing.system: timing.rtf for timing in timings}
    return [
        (
            row.model_copy(update={"rtf": rtf_by_system[row.system]})
            if row.system in rtf_by_system
            else row
        )
        for row in rows
    ]


def count_parameters(model: torch.nn.Module) -> int:
    """Number of scalar parameters"""
    return int(sum(p.numel() for p in model.parameters()))


def _optional(value: Optional[float], digits: int) -> str:
    """Blank for None"""
    return "" if value is None else f"{value:.{digits}f}"


def _cells(row: MetricRow) -> List[str]:
    """Rendered cells in REPORT_COLUMNS order"""
    return [
        row.system,
        row.speaker_group,
        row.language,
        f"{row.secs:.3f}",
        f"{row.eecs:.3f}",
        f"{100.0 * row.uer:.2f}",
        _optional(row.utmos_proxy, 3),
        _optional(row.rtf, 3),
    ]


def render_report(
    rows: Sequence[MetricRow], fmt: Union[ReportFormat, str]
) -> str:
    """Table text; rows sorted by system, group, language"""
    fmt = ReportFormat(fmt)
    ordered = sorted(rows, key=lambda r: r.sort_key)
    if fmt == ReportFormat.TSV:
        lines = ["\t".join(REPORT_COLUMNS)]
        lines.extend("\t".join(_cells(row)) for row in ordered)
    else:
        lines = [
            "| " + " | ".join(REPORT_COLUMNS) + " |",
            "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|",
        ]
        lines.extend(
            "| " + " | ".join(_cells(row)) + " |" for row in ordered
        )
    return "\n".join(lines) + "\n"


def emit_report(
    rows: Sequence[MetricRow],
    fmt: Union[ReportFormat, str],
    path: Union[Path, str],
) -> Path:
    """Writes the table; identical rows give identical bytes"""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_report(rows, fmt))
    return path


def parse_report(text: str, fmt: Union[ReportFormat, str]) -> List[MetricRow]:
    """
    Reads rows back from render_report output.
    Parameters
    ----------
    text : str
    fmt : Union[ReportFormat, str]

    Returns
    -------
    List[MetricRow]

    """
    fmt = ReportFormat(fmt)
    lines = [line for line in text.split("\n") if line]
    if fmt == ReportFormat.TSV:
        header = lines[0].split("\t")
        body = [line.split("\t") for line in lines[1:]]
    else:
        header = [c.strip() for c in lines[0].strip("|").split("|")]
        body = [
            [c.strip() for c in line[1:-1].split("|")] for line in lines[2:]
        ]
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"Unexpected report header {header}")
    rows = []
    for number, cells in enumerate(body, start=2):
        if len(cells) != len(REPORT_COLUMNS):
            raise ValueError(
                f"Report line {number} has {len(cells)} cells, expected "
                f"{len(REPORT_COLUMNS)}"
            )
        rows.append(
            MetricRow(
                system=cells[0],
                speaker_group=cells[1],
                language=cells[2],
                secs=float(cells[3]),
                eecs=float(cells[4]),
                uer=float(cells[5]) / 100.0,
                utmos_proxy=float(cells[6]) if cells[6] else None,
                rtf=float(cells[7]) if cells[7] else None,
            )
        )
    return rows


def units_of(
    waveform: Waveform, codebook: UnitCodebook, mel_config: MelConfig
) -> np.ndarray:
    """Unit tokens of a waveform"""
    return encode_units(mel_spectrogram(waveform, mel_config), codebook).units


@dataclass
class PerturbationAnalysis:
    """Rows for perturbed and original audio plus classifier accuracies"""

    rows: List[MetricRow]
    summary: Dict[str, float]


def analyze_perturbation(
    pairs: Sequence[PerturbedPair],
    records: Sequence[ManifestRecord],
    manifest_dir: Union[Path, str],
    pair_manifest_dir: Union[Path, str],
    speaker_encoder: ClassifierEncoder,
    emotion_encoder: ClassifierEncoder,
    codebook: UnitCodebook,
    mel_config: MelConfig,
) -> PerturbationAnalysis:
    """
    Scores both perturbed copies of each utterance against the clean
    source: SECS, EECS, unit error rate, and how often the frozen
    classifiers still recover the speaker and the emotion.
    Parameters
    ----------
    pairs : Sequence[PerturbedPair]
    records : Sequence[ManifestRecord]
      Clean records; pairs without a record are skipped
    manifest_dir : Union[Path, str]
    pair_manifest_dir : Union[Path, str]
    speaker_encoder : ClassifierEncoder
    emotion_encoder : ClassifierEncoder
    codebook : UnitCodebook
    mel_config : MelConfig

    Returns
    -------
    PerturbationAnalysis

    """
    by_id = {r.utterance_id: r for r in records}
    scores = {"secs": [], "eecs": [], "uer": []}
    hits = {
        "clean_speaker": [],
        "clean_emotion": [],
        "perturbed_speaker": [],
        "perturbed_emotion": [],
    }
    external = False
    selected = [p for p in pairs if p.source_id in by_id]
    for counter, pair in enumerate(selected, start=1):
        logging.debug(
            f"Analyzing {pair.source_id}. On {counter} of {len(selected)}"
        )
        record = by_id[pair.source_id]
        clean = load_wav(record.resolve_wav(manifest_dir))
        clean_units = units_of(clean, codebook, mel_config)
        hits["clean_speaker"].append(
            predict_label(clean, speaker_encoder) == record.speaker_id
        )
        hits["clean_emotion"].append(
            predict_label(clean, emotion_encoder) == record.emotion_id
        )
        external = external or bool(np.isnan(pair.factor_R))
        for path in pair.resolve(pair_manifest_dir):
            perturbed = load_wav(path)
            scores["secs"].append(secs(clean, perturbed, speaker_encoder))
            scores["eecs"].append(eecs(clean, perturbed, emotion_encoder))
            scores["uer"].append(
                unit_error_rate(
                    units_of(perturbed, codebook, mel_config), clean_units
                )
            )
            hits["perturbed_speaker"].append(
                predict_label(perturbed, speaker_encoder) == record.speaker_id
            )
            hits["perturbed_emotion"].append(
                predict_label(perturbed, emotion_encoder) == record.emotion_id
            )
    if not selected:
        return PerturbationAnalysis(rows=[], summary={})
    system = SPEAKER_ANONYMIZATION if external else FORMANT_SHIFT
    rows = [
        MetricRow(
            system=system,
            secs=float(np.mean(scores["secs"])),
            eecs=float(np.mean(scores["eecs"])),
            uer=float(np.mean(scores["uer"])),
        ),
        MetricRow(system=ORIGINAL_AUDIO, secs=1.0, eecs=1.0, uer=0.0),
    ]
    summary = {
        f"{name}_accuracy": float(np.mean(values))
        for name, values in hits.items()
    }
    return PerturbationAnalysis(rows=rows, summary=summary)


@dataclass
class SynthesisScore:
    """Metrics of one synthesized test utterance"""

    utterance_id: str
    speaker_group: str
    language: str
    secs: float
    eecs: float
    uer: float
    speaker_hit: bool
    emotion_hit: bool


def score_synthesis(
    utterance_id: str,
    generated: Waveform,
    emotion_reference: Waveform,
    speaker_reference: Waveform,
    reference_units: np.ndarray,
    target_speaker: int,
    reference_emotion: int,
    speaker_group: str,
    language: str,
    speaker_encoder: ClassifierEncoder,
    emotion_encoder: ClassifierEncoder,
    codebook: UnitCodebook,
    mel_config: MelConfig,
) -> SynthesisScore:
    """
    Scores one generated utterance: SECS against clean audio of the target
    speaker, EECS against the emotion reference, unit error rate against
    the reference's units, and the frozen classifiers' decisions.
    Parameters
    ----------
    utterance_id : str
    generated : Waveform
    emotion_reference : Waveform
    speaker_reference : Waveform
    reference_units : np.ndarray
    target_speaker : int
    reference_emotion : int
    speaker_group : str
      'same' or 'cross'
    language : str
    speaker_encoder : ClassifierEncoder
    emotion_encoder : ClassifierEncoder
    codebook : UnitCodebook
    mel_config : MelConfig

    Returns
    -------
    SynthesisScore

    """
    return SynthesisScore(
        utterance_id=utterance_id,
        speaker_group=speaker_group,
        language=language,
        secs=secs(generated, speaker_reference, speaker_encoder),
        eecs=eecs(generated, emotion_reference, emotion_encoder),
        uer=unit_error_rate(
            units_of(generated, codebook, mel_config), reference_units
        ),
        speaker_hit=predict_label(generated, speaker_encoder)
        == target_speaker,
        emotion_hit=predict_label(generated, emotion_encoder)
        == reference_emotion,
    )


def aggregate_scores(
    scores: Sequence[SynthesisScore], system: str
) -> List[MetricRow]:
    """Mean metrics per (speaker_group, language)"""
    groups: Dict[Tuple[str, str], List[SynthesisScore]] = {}
    for score in scores:
        groups.setdefault((score.speaker_group, score.language), []).append(
            score
        )
    rows = []
    for (group, language), members in sorted(groups.items()):
        rows.append(
            MetricRow(
                system=system,
                speaker_group=group,
                language=language,
                secs=float(np.mean([m.secs for m in members])),
                eecs=float(np.mean([m.eecs for m in members])),
                uer=float(np.mean([m.uer for m in members])),
            )
        )
    return rows


def classifier_accuracy(scores: Sequence[SynthesisScore]) -> Dict[str, float]:
    """Rates at which the frozen classifiers recover the target speaker and
    the reference emotion, overall and per speaker group"""
    summary = {}
    for group in sorted({s.speaker_group for s in scores}):
        members = [s for s in scores if s.speaker_group == group]
        summary[f"{group}_speaker_accuracy"] = float(
            np.mean([m.speaker_hit for m in members])
        )
        summary[f"{group}_emotion_accuracy"] = float(
            np.mean([m.emotion_hit for m in members])
        )
    if scores:
        summary["speaker_accuracy"] = float(
            np.mean([s.speaker_hit for s in scores])
        )
        summary["emotion_accuracy"] = float(
            np.mean([s.emotion_hit for s in scores])
        )
    return summary
