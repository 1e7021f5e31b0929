"""
Synthetic speech-like corpus: speaker and emotion profiles, source-filter
rendering of phoneme strings, and the tab-separated manifest that every
pipeline stage reads.
"""

import hashlib
from enum import Enum
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import signal

from xling_emotion_tts.audio_dsp import Waveform
from xling_emotion_tts.configs import CorpusConfig
from xling_emotion_tts.exceptions import ConfigurationError

# Maps characters of the synthetic pseudo-language onto phoneme ids
PSEUDO_ALPHABET = "abcdefghijklmnopqrstuvwxyz.,'-?!"
FORMANT_BANDWIDTHS = (80.0, 100.0, 140.0)
# Relative formant offsets per phoneme (F1, F2, F3)
FORMANT_OFFSET_DEPTH = (0.015, 0.15, 0.08)
CONTOUR_DEPTH = 0.2
NOISE_LEVEL = 0.01
PEAK_LEVEL = 0.5
MANIFEST_FIELDS = 7


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    """
    Independent generator for (seed, keys). Keys are hashed so the stream of
    one utterance does not depend on the order utterances are processed.
    Parameters
    ----------
    seed : int
    keys : object
      e.g. an utterance id and a stream name

    Returns
    -------
    np.random.Generator

    """
    digest = hashlib.sha256(
        "\t".join(str(k) for k in keys).encode("utf-8")
    ).digest()
    entropy = [seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF] + [
        int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def utterance_seed(seed: int, utterance_id: str) -> int:
    """Rendering seed of one utterance"""
    return int(derive_rng(seed, utterance_id, "render").integers(2**31))


class ContourShape(str, Enum):
    """Shapes of the F0 contour over an utterance"""

    FLAT = "flat"
    RISING = "rising"
    FALLING = "falling"
    OSCILLATING = "oscillating"


class SpeakerProfile(BaseModel):
    """Vocal-tract resonances and base pitch of one synthetic speaker"""

    speaker_id: int = Field(..., ge=0)
    formants: Tuple[float, float, float] = Field(
        ..., description="F1 < F2 < F3 in Hz"
    )
    base_pitch: float = Field(..., ge=80.0, le=300.0)

    @field_validator("formants")
    @classmethod
    def check_formants(cls, formants):
        """Formants within [200, 4000] Hz and strictly increasing"""
        if any(f < 200.0 or f > 4000.0 for f in formants):
            raise ValueError("formants must lie in [200, 4000] Hz")
        if not formants[0] < formants[1] < formants[2]:
            raise ValueError("formants must be strictly increasing")
        return formants


class EmotionProfile(BaseModel):
    """Prosodic rendering parameters of one emotion category"""

    emotion_id: int = Field(..., ge=0)
    pitch_gain: float = Field(..., ge=0.0)
    contour_shape: ContourShape
    energy_gain: float = Field(..., gt=0.0)
    rate_factor: float = Field(..., ge=0.7, le=1.3)

    @property
    def signature(self) -> Tuple:
        """Tuple that must differ between emotions"""
        return (
            self.contour_shape,
            self.pitch_gain,
            self.energy_gain,
            self.rate_factor,
        )


class UtteranceSpec(BaseModel):
    """Phoneme string with per-phoneme frame durations"""

    phoneme_ids: List[int]
    durations: List[int]
    language_id: int = Field(..., ge=0, le=1)

    @model_validator(mode="after")
    def check_lengths(self):
        """Equal lengths, positive durations"""
        if len(self.phoneme_ids) != len(self.durations):
            raise ValueError("phoneme_ids and durations differ in length")
        if not self.phoneme_ids:
            raise ValueError("an utterance needs at least one phoneme")
        if any(d < 1 for d in self.durations):
            raise ValueError("durations must be >= 1")
        if any(p < 0 for p in self.phoneme_ids):
            raise ValueError("phoneme_ids must be >= 0")
        return self

    @property
    def total_frames(self) -> int:
        """Sum of durations"""
        return sum(self.durations)


class ManifestRecord(BaseModel):
    """One corpus utterance. wav_path is relative to the manifest's
    directory unless absolute."""

    utterance_id: str
    wav_path: str
    speaker_id: int = Field(..., ge=0)
    emotion_id: int = Field(..., ge=0)
    language_id: int = Field(..., ge=0, le=1)
    phoneme_ids: List[int]
    durations: List[int]

    @field_validator("utterance_id", "wav_path")
    @classmethod
    def check_no_whitespace_separators(cls, value):
        """Tabs and newlines would break the manifest layout"""
        if not value or any(c in value for c in "\t\n\r"):
            raise ValueError("must be non-empty without tabs or newlines")
        return value

    @model_validator(mode="after")
    def check_lengths(self):
        """Same contract as UtteranceSpec"""
        UtteranceSpec(
            phoneme_ids=self.phoneme_ids,
            durations=self.durations,
            language_id=self.language_id,
        )
        return self

    @property
    def total_frames(self) -> int:
        """Sum of durations"""
        return sum(self.durations)

    def resolve_wav(self, manifest_dir: Union[Path, str]) -> Path:
        """Absolute location of the WAV file"""
        path = Path(self.wav_path)
        return path if path.is_absolute() else Path(manifest_dir) / path


def default_speakers(num_speakers: int) -> List[SpeakerProfile]:
    """
    Speaker profiles with well separated formants and close base pitches,
    so identity lives in the spectral envelope.
    Parameters
    ----------
    num_speakers : int

    Returns
    -------
    List[SpeakerProfile]

    """
    presets = [
        ((500.0, 1500.0, 2500.0), 105.0),
        ((650.0, 1800.0, 2800.0), 120.0),
        ((400.0, 1200.0, 2300.0), 135.0),
        ((750.0, 2100.0, 3100.0), 150.0),
    ]
    speakers = []
    for speaker_id in range(num_speakers):
        if speaker_id < len(presets):
            formants, pitch = presets[speaker_id]
        else:
            # Interleave further speakers between the presets
            step = speaker_id - len(presets) + 1
            scale = 1.0 + 0.06 * (step % 5) - 0.12 * (step % 2)
            base = presets[step % len(presets)][0]
            formants = tuple(round(f * scale, 1) for f in base)
            pitch = 100.0 + 7.0 * (step % 8)
        speakers.append(
            SpeakerProfile(
                speaker_id=speaker_id, formants=formants, base_pitch=pitch
            )
        )
    return speakers


def default_emotions(num_emotions: int) -> List[EmotionProfile]:
    """
    Emotion profiles: neutral, happy, sad, angry, then generated variants.
    Parameters
    ----------
    num_emotions : int

    Returns
    -------
    List[EmotionProfile]

    """
    presets = [
        (ContourShape.FLAT, 1.0, 1.0, 1.0),
        (ContourShape.RISING, 1.2, 1.3, 0.85),
        (ContourShape.FALLING, 0.85, 0.6, 1.2),
        (ContourShape.OSCILLATING, 1.1, 1.6, 0.9),
    ]
    shapes = list(ContourShape)
    emotions = []
    for emotion_id in range(num_emotions):
        if emotion_id < len(presets):
            shape, pitch_gain, energy_gain, rate = presets[emotion_id]
        else:
            step = emotion_id - len(presets) + 1
            shape = shapes[emotion_id % len(shapes)]
            pitch_gain = round(0.9 + 0.05 * step, 3)
            energy_gain = round(0.8 + 0.1 * (step % 7), 3)
            rate = round(0.8 + 0.05 * (step % 9), 3)
        emotions.append(
            EmotionProfile(
                emotion_id=emotion_id,
                pitch_gain=pitch_gain,
                contour_shape=shape,
                energy_gain=energy_gain,
                rate_factor=rate,
            )
        )
    return emotions


def text_to_phonemes(text: str, phoneme_vocab: int = 32) -> List[int]:
    """
    Maps pseudo-language text to phoneme ids, one character per phoneme.
    Whitespace is skipped; case is ignored.
    Parameters
    ----------
    text : str
    phoneme_vocab : int

    Returns
    -------
    List[int]

    """
    phoneme_ids = []
    for position, char in enumerate(text.lower()):
        if char.isspace():
            continue
        index = PSEUDO_ALPHABET.find(char)
        if index < 0 or index >= phoneme_vocab:
            raise ConfigurationError(
                f"Character {char!r} at position {position} is not in the "
                f"pseudo-language alphabet"
            )
        phoneme_ids.append(index)
    if not phoneme_ids:
        raise ConfigurationError("Text contains no phonemes")
    return phoneme_ids


def scale_durations(durations: List[int], rate_factor: float) -> List[int]:
    """
    Applies a speaking-rate factor with cumulative rounding, so the total is
    round(sum(durations) * rate_factor) whenever every phoneme keeps at least
    one frame.
    Parameters
    ----------
    durations : List[int]
    rate_factor : float

    Returns
    -------
    List[int]

    """
    scaled = []
    boundary = 0
    for cumulative in np.cumsum(durations):
        target = max(boundary + 1, int(round(cumulative * rate_factor)))
        scaled.append(target - boundary)
        boundary = target
    return scaled


def _contour(shape: ContourShape, position: np.ndarray) -> np.ndarray:
    """Contour in [-1, 1] over relative position in [0, 1]"""
    if shape == ContourShape.RISING:
        return 2.0 * position - 1.0
    if shape == ContourShape.FALLING:
        return 1.0 - 2.0 * position
    if shape == ContourShape.OSCILLATING:
        return np.sin(4.0 * np.pi * position)
    return np.zeros_like(position)


def phoneme_formants(
    formants: Tuple[float, float, float], phoneme_id: int
) -> Tuple[float, ...]:
    """Speaker formants moved by the deterministic offsets of a phoneme"""
    phases = (1.7 * phoneme_id + 0.3, 2.3 * phoneme_id + 1.1, 0.9 * phoneme_id)
    return tuple(
        f * (1.0 + depth * np.sin(phase))
        for f, depth, phase in zip(formants, FORMANT_OFFSET_DEPTH, phases)
    )


def phoneme_amplitude(phoneme_id: int) -> float:
    """Relative loudness of a phoneme in [0.7, 1.0]"""
    return 0.85 + 0.15 * float(np.sin(1.3 * phoneme_id + 0.5))


def resonator_coefficients(
    frequency: float, bandwidth: float, sample_rate: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Second-order digital resonator with unit gain at DC.
    Parameters
    ----------
    frequency : float
    bandwidth : float
    sample_rate : int

    Returns
    -------
    Tuple[np.ndarray, np.ndarray]
      (b, a) filter coefficients for scipy.signal.lfilter

    """
    r = np.exp(-np.pi * bandwidth / sample_rate)
    c = -(r**2)
    b = 2.0 * r * np.cos(2.0 * np.pi * frequency / sample_rate)
    a = 1.0 - b - c
    return np.array([a]), np.array([1.0, -b, -c])


def _check_nyquist(speaker: SpeakerProfile, sample_rate: int) -> None:
    """Rejects speakers whose resonances cannot be represented"""
    nyquist = sample_rate / 2.0
    for index, formant in enumerate(speaker.formants, start=1):
        if formant >= nyquist:
            raise ConfigurationError(
                f"Speaker {speaker.speaker_id}: F{index} = {formant} Hz "
                f"is not below the Nyquist frequency {nyquist} Hz"
            )


def render_utterance(
    spec: UtteranceSpec,
    speaker: SpeakerProfile,
    emotion: EmotionProfile,
    sample_rate: int,
    seed: int,
    hop: int = 256,
) -> Waveform:
    """
    Source-filter rendering: a pulse train following the emotion's F0
    contour, plus a little aspiration noise, filtered through three
    resonators at the speaker's formants moved per phoneme. Each phoneme
    lasts an integer number of hops after the rate factor is applied.
    Parameters
    ----------
    spec : UtteranceSpec
    speaker : SpeakerProfile
    emotion : EmotionProfile
    sample_rate : int
    seed : int
    hop : int
      Samples per frame

    Returns
    -------
    Waveform

    """
    if sample_rate < 8000:
        raise ConfigurationError(
            f"sample_rate must be >= 8000, got {sample_rate}"
        )
    _check_nyquist(speaker, sample_rate)
    rng = derive_rng(seed, "render")
    frames = scale_durations(spec.durations, emotion.rate_factor)
    num_samples = sum(frames) * hop
    position = np.arange(num_samples) / max(1, num_samples - 1)
    f0 = (
        speaker.base_pitch
        * emotion.pitch_gain
        * (1.0 + CONTOUR_DEPTH * _contour(emotion.contour_shape, position))
    )
    phase = np.cumsum(f0 / sample_rate)
    source = np.zeros(num_samples)
    source[1:][np.diff(np.floor(phase)) > 0] = 1.0
    source[0] = 1.0
    source += NOISE_LEVEL * rng.standard_normal(num_samples)

    gain = np.repeat(
        [phoneme_amplitude(p) for p in spec.phoneme_ids],
        [n * hop for n in frames],
    )
    ramp = max(1, int(0.005 * sample_rate))
    gain = np.convolve(
        np.pad(gain, (ramp // 2, ramp - 1 - ramp // 2), mode="edge"),
        np.ones(ramp) / ramp,
        mode="valid",
    )
    source *= gain

    nyquist = sample_rate / 2.0
    states = [np.zeros(2) for _ in FORMANT_BANDWIDTHS]
    output = np.zeros(num_samples)
    start = 0
    for phoneme_id, count in zip(spec.phoneme_ids, frames):
        stop = start + count * hop
        segment = source[start:stop]
        for index, (frequency, bandwidth) in enumerate(
            zip(
                phoneme_formants(speaker.formants, phoneme_id),
                FORMANT_BANDWIDTHS,
            )
        ):
            b, a = resonator_coefficients(
                min(frequency, 0.95 * nyquist), bandwidth, sample_rate
            )
            segment, states[index] = signal.lfilter(
                b, a, segment, zi=states[index]
            )
        output[start:stop] = segment
        start = stop
    output -= np.mean(output)
    peak = np.max(np.abs(output))
    if peak > 0:
        output *= PEAK_LEVEL / peak
    output = np.clip(output * emotion.energy_gain, -1.0, 1.0)
    return Waveform(samples=output, sample_rate=sample_rate)


def plan_utterances(
    config: CorpusConfig, seed: int
) -> List[Tuple[ManifestRecord, UtteranceSpec]]:
    """
    Draws the phoneme strings of the whole corpus. Records carry the
    rendered durations; the specs carry the unscaled durations that
    render_utterance expects.
    Parameters
    ----------
    config : CorpusConfig
    seed : int

    Returns
    -------
    List[Tuple[ManifestRecord, UtteranceSpec]]
      Sorted by utterance id

    """
    emotions = default_emotions(config.num_emotions)
    vocab = np.arange(config.phoneme_vocab)
    language_weights = [
        np.exp(-vocab / (config.phoneme_vocab / 2.0)),
        np.exp(-(vocab[::-1]) / (config.phoneme_vocab / 2.0)),
    ]
    planned = []
    for speaker_id in range(config.num_speakers):
        for emotion in emotions:
            for index in range(config.utterances_per_pair):
                utterance_id = (
                    f"spk{speaker_id:02d}_emo{emotion.emotion_id:02d}_"
                    f"{index:04d}"
                )
                rng = derive_rng(seed, utterance_id, "text")
                language_id = index % 2
                weights = language_weights[language_id]
                length = int(
                    rng.integers(config.min_phonemes, config.max_phonemes + 1)
                )
                phoneme_ids = rng.choice(
                    config.phoneme_vocab,
                    size=length,
                    p=weights / weights.sum(),
                ).tolist()
                durations = rng.integers(
                    config.min_duration, config.max_duration + 1, size=length
                ).tolist()
                spec = UtteranceSpec(
                    phoneme_ids=phoneme_ids,
                    durations=durations,
                    language_id=language_id,
                )
                record = ManifestRecord(
                    utterance_id=utterance_id,
                    wav_path=f"wavs/{utterance_id}.wav",
                    speaker_id=speaker_id,
                    emotion_id=emotion.emotion_id,
                    language_id=language_id,
                    phoneme_ids=phoneme_ids,
                    durations=scale_durations(durations, emotion.rate_factor),
                )
                planned.append((record, spec))
    return sorted(planned, key=lambda item: item[0].utterance_id)


def split_records(
    records: List[ManifestRecord], holdout_every: int = 5
) -> Tuple[List[ManifestRecord], List[ManifestRecord]]:
    """
    Splits records into (train, held_out). Every holdout_every-th utterance
    of each (speaker, emotion) combination, in utterance id order, is held
    out.
    Parameters
    ----------
    records : List[ManifestRecord]
    holdout_every : int

    Returns
    -------
    Tuple[List[ManifestRecord], List[ManifestRecord]]

    """
    counters = {}
    train, held_out = [], []
    for record in sorted(records, key=lambda r: r.utterance_id):
        key = (record.speaker_id, record.emotion_id)
        counters[key] = counters.get(key, 0) + 1
        if counters[key] % holdout_every == 0:
            held_out.append(record)
        else:
            train.append(record)
    return train, held_out


def serialize_manifest(records: List[ManifestRecord]) -> str:
    """
    Manifest text: one tab-separated line per record.
    Parameters
    ----------
    records : List[ManifestRecord]

    Returns
    -------
    str

    """
    lines = []
    for r in records:
        lines.append(
            "\t".join(
                [
                    r.utterance_id,
                    r.wav_path,
                    str(r.speaker_id),
                    str(r.emotion_id),
                    str(r.language_id),
                    " ".join(str(p) for p in r.phoneme_ids),
                    " ".join(str(d) for d in r.durations),
                ]
            )
        )
    return "".join(f"{line}\n" for line in lines)


def parse_manifest(text: str) -> List[ManifestRecord]:
    """
    Inverse of serialize_manifest. Blank lines are ignored.
    Parameters
    ----------
    text : str

    Returns
    -------
    List[ManifestRecord]

    """
    records = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != MANIFEST_FIELDS:
            raise ValueError(
                f"Manifest line {line_number}: expected {MANIFEST_FIELDS} "
                f"fields, found {len(fields)}"
            )
        try:
            records.append(
                ManifestRecord(
                    utterance_id=fields[0],
                    wav_path=fields[1],
                    speaker_id=int(fields[2]),
                    emotion_id=int(fields[3]),
                    language_id=int(fields[4]),
                    phoneme_ids=[int(p) for p in fields[5].split()],
                    durations=[int(d) for d in fields[6].split()],
                )
            )
        except ValueError as e:
            raise ValueError(f"Manifest line {line_number}: {e}") from e
    return records


def read_manifest(path: Union[Path, str]) -> List[ManifestRecord]:
    """Reads a manifest file"""
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def write_manifest(
    records: List[ManifestRecord], path: Union[Path, str]
) -> Path:
    """Writes a manifest file, records sorted by utterance id"""
    path = Path(path)
    ordered = sorted(records, key=lambda r: r.utterance_id)
    path.write_text(serialize_manifest(ordered), encoding="utf-8")
    return path
