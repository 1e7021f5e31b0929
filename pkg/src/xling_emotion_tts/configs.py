"""
Configuration models shared by the library modules and the jobs. A single
GlobalConfig JSON file drives the whole pipeline; each section below is one
of its keys.
"""

import json
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from xling_emotion_tts.exceptions import ConfigurationError


class StrictModel(BaseModel):
    """Base model rejecting unknown keys"""

    model_config = ConfigDict(extra="forbid")


class MelConfig(StrictModel):
    """Analysis settings for log-mel spectrograms"""

    n_fft: int = Field(default=1024, ge=16)
    hop: int = Field(default=256, ge=1)
    win: int = Field(default=1024, ge=16)
    n_mels: int = Field(default=80, ge=1)
    fmin: float = Field(default=0.0, ge=0.0)
    fmax: Optional[float] = Field(
        default=None, description="Upper mel edge. Defaults to Nyquist."
    )
    log_floor: float = Field(default=1e-5, gt=0.0)

    @model_validator(mode="after")
    def check_window(self):
        """Window must fit in the FFT and exceed the hop."""
        if self.win > self.n_fft:
            raise ValueError("win must not exceed n_fft")
        if self.hop > self.win:
            raise ValueError("hop must not exceed win")
        return self

    @property
    def pad(self) -> int:
        """Reflect padding applied on each side so that an audio of k * hop
        samples yields exactly k frames."""
        return (self.n_fft - self.hop) // 2


class PitchConfig(StrictModel):
    """Normalized-autocorrelation pitch tracker settings"""

    fmin: float = Field(default=60.0, gt=0.0)
    fmax: float = Field(default=500.0, gt=0.0)
    voicing_threshold: float = Field(default=0.45, gt=0.0, lt=1.0)
    octave_ratio: float = Field(
        default=0.9,
        gt=0.0,
        le=1.0,
        description=(
            "A sub-multiple of the strongest lag is chosen as the period "
            "when it and all its multiples reach this fraction of the "
            "frame maximum."
        ),
    )
    octave_tolerance: float = Field(
        default=0.6,
        gt=0.0,
        description=(
            "Frames further than this many octaves from the utterance "
            "median are searched again near the median period."
        ),
    )
    win: int = Field(default=512, ge=64)
    hop: int = Field(default=256, ge=1)

    @model_validator(mode="after")
    def check_range(self):
        """Search range must be ordered."""
        if self.fmin >= self.fmax:
            raise ValueError("fmin must be below fmax")
        return self


class CorpusConfig(StrictModel):
    """Synthetic corpus layout"""

    num_speakers: int = Field(default=4, ge=2)
    num_emotions: int = Field(default=4, ge=2)
    utterances_per_pair: int = Field(
        default=50,
        ge=1,
        description="Utterances per (speaker, emotion) combination",
    )
    phoneme_vocab: int = Field(default=32, ge=2)
    min_phonemes: int = Field(default=8, ge=1)
    max_phonemes: int = Field(default=12, ge=1)
    min_duration: int = Field(
        default=6, ge=2, description="Minimum frames per phoneme"
    )
    max_duration: int = Field(default=12, ge=2)
    hop: int = Field(default=256, ge=1)
    holdout_every: int = Field(
        default=5,
        ge=2,
        description=(
            "Every n-th utterance of each (speaker, emotion) combination is "
            "held out from training"
        ),
    )

    @model_validator(mode="after")
    def check_ranges(self):
        """Min/max pairs must be ordered."""
        if self.min_phonemes > self.max_phonemes:
            raise ValueError("min_phonemes must not exceed max_phonemes")
        if self.min_duration > self.max_duration:
            raise ValueError("min_duration must not exceed max_duration")
        return self


class PerturbationStrategy(str, Enum):
    """Speaker perturbation strategies"""

    FORMANT_SHIFT = "formant_shift"
    EXTERNAL_ANONYMIZER = "external_anonymizer"


class PerturbationSpec(StrictModel):
    """Parameters of the formant-shift perturbation"""

    strategy: PerturbationStrategy = Field(
        default=PerturbationStrategy.FORMANT_SHIFT
    )
    factor_low: float = Field(default=1.0)
    factor_high: float = Field(default=1.4)
    seed: int = Field(default=0)
    external_audio_dir: Optional[Path] = Field(
        default=None,
        description=(
            "Directory with {utterance_id}_R.wav and {utterance_id}_E.wav "
            "produced by an external anonymizer"
        ),
    )

    @model_validator(mode="after")
    def check_factor_range(self):
        """1 <= factor_low < factor_high <= 2"""
        if not (1.0 <= self.factor_low < self.factor_high <= 2.0):
            raise ValueError(
                "Factor range must satisfy 1 <= factor_low < factor_high <= 2"
            )
        return self


class CodebookConfig(StrictModel):
    """k-means unit codebook settings"""

    num_units: int = Field(default=64, ge=2)
    max_frames: int = Field(
        default=20000, ge=2, description="Frames subsampled for fitting"
    )
    max_iter: int = Field(default=100, ge=1)
    n_init: int = Field(
        default=10,
        ge=1,
        description="k-means++ seedings; the lowest final inertia is kept",
    )


class EncoderConfig(StrictModel):
    """Reference classifier encoder settings"""

    channels: int = Field(default=128, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    kernel_size: int = Field(default=5, ge=1)
    steps: int = Field(default=600, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    crop_frames: int = Field(default=64, ge=4)


class Txt2VecConfig(StrictModel):
    """Stage-1 model dimensions"""

    phoneme_vocab: int = Field(default=32, ge=2)
    num_languages: int = Field(default=2, ge=1)
    d_model: int = Field(default=128, ge=2)
    n_heads: int = Field(default=2, ge=1)
    encoder_blocks: int = Field(default=2, ge=1)
    decoder_blocks: int = Field(default=2, ge=1)
    ff_dim: int = Field(default=256, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    num_units: int = Field(default=64, ge=2)
    n_mels: int = Field(default=80, ge=1)
    style_kernel: int = Field(default=5, ge=1)
    variance_kernel: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def check_heads(self):
        """d_model must split evenly across heads."""
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        return self


class Vec2WavConfig(StrictModel):
    """Stage-2 model dimensions and conditioning switches"""

    num_units: int = Field(default=64, ge=2)
    num_speakers: int = Field(default=4, ge=1)
    d_model: int = Field(default=128, ge=2)
    speaker_dim: int = Field(default=64, ge=1)
    emotion_dim: int = Field(default=64, ge=1)
    external_speaker_dim: int = Field(default=64, ge=1)
    decoder_blocks: int = Field(default=2, ge=1)
    kernel_size: int = Field(default=5, ge=1)
    upsample_rates: List[int] = Field(default=[8, 8, 4])
    upsample_channels: int = Field(default=128, ge=1)
    epsilon: float = Field(default=1e-5, gt=0.0)
    use_sealn: bool = Field(
        default=True,
        description="False replaces SEALN with plain layer norm",
    )
    use_emotion: bool = Field(
        default=True, description="False zeroes the emotion representation"
    )
    speaker_mode: Literal["lookup", "external"] = Field(default="lookup")

    @property
    def hop(self) -> int:
        """Samples generated per frame"""
        hop = 1
        for rate in self.upsample_rates:
            hop *= rate
        return hop

    @model_validator(mode="after")
    def check_rates(self):
        """Upsample rates must be even so the transposed convolutions
        produce exactly rate samples per input step."""
        if not self.upsample_rates or any(
            r < 2 or r % 2 for r in self.upsample_rates
        ):
            raise ValueError("upsample_rates must be even integers >= 2")
        return self


class PerturbationMode(str, Enum):
    """How stage 2 obtains its perturbed inputs"""

    PRECOMPUTED = "precomputed"
    PER_EPOCH = "per_epoch"
    NONE = "none"


class TrainConfig(StrictModel):
    """Optimization settings for one stage"""

    stage: Literal["txt2vec", "vec2wav"]
    steps: int = Field(default=3000, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    adam_betas: List[float] = Field(default=[0.9, 0.98])
    grad_clip: float = Field(default=1.0, gt=0.0)
    seed: int = Field(default=0)
    scl_alpha: float = Field(
        default=1.0,
        ge=0.0,
        description="Speaker consistency loss weight; 0 disables SCL",
    )
    perturbation: PerturbationMode = Field(
        default=PerturbationMode.PRECOMPUTED
    )
    segment_frames: int = Field(
        default=32, ge=1, description="Frames per vec2wav training crop"
    )
    checkpoint_every: int = Field(default=500, ge=1)
    deterministic: bool = Field(
        default=True, description="Single-threaded deterministic mode"
    )


class EvaluationConfig(StrictModel):
    """Evaluation and report settings"""

    system_name: str = Field(default="proposed")
    num_test_utterances: int = Field(default=100, ge=1)
    rtf_utterances: int = Field(default=5, ge=5)
    analyze_perturbation: bool = Field(default=True)
    report_inputs: List[Path] = Field(
        default=[],
        description=(
            "Extra report.json files merged by the report subcommand, e.g. "
            "from ablation workdirs"
        ),
    )


class PathsConfig(StrictModel):
    """Filesystem locations"""

    workdir: Path = Field(..., description="Root of all artifacts")


class ArtifactPaths:
    """Fixed artifact layout under a workdir"""

    def __init__(self, workdir: Path):
        """
        Class constructor for ArtifactPaths.

        Parameters
        ----------
        workdir : Path
        """
        self.workdir = Path(workdir)
        self.corpus_dir = self.workdir / "corpus"
        self.manifest = self.corpus_dir / "manifest.tsv"
        self.perturbed_dir = self.workdir / "perturbed"
        self.pair_manifest = self.perturbed_dir / "pairs.tsv"
        self.codebook = self.workdir / "codebook.ckpt"
        self.speaker_encoder = self.workdir / "speaker_encoder.ckpt"
        self.emotion_encoder = self.workdir / "emotion_encoder.ckpt"
        self.txt2vec = self.workdir / "txt2vec.ckpt"
        self.txt2vec_runlog = self.workdir / "txt2vec_runlog.jsonl"
        self.vec2wav = self.workdir / "vec2wav.ckpt"
        self.vec2wav_runlog = self.workdir / "vec2wav_runlog.jsonl"
        self.synth_dir = self.workdir / "synth"
        self.eval_dir = self.workdir / "eval"
        self.eval_report_json = self.eval_dir / "report.json"
        self.eval_timing_json = self.eval_dir / "timing.json"
        self.report_tsv = self.eval_dir / "report.tsv"
        self.report_markdown = self.eval_dir / "report.md"


class GlobalConfig(StrictModel):
    """Whole-pipeline configuration read from one JSON file"""

    seed: int = Field(default=0)
    sample_rate: int = Field(default=16000, ge=8000)
    num_workers: int = Field(default=1, ge=1)
    paths: PathsConfig
    mel: MelConfig = Field(default_factory=MelConfig)
    pitch: PitchConfig = Field(default_factory=PitchConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    perturbation: PerturbationSpec = Field(default_factory=PerturbationSpec)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    encoders: EncoderConfig = Field(default_factory=EncoderConfig)
    txt2vec: Txt2VecConfig = Field(default_factory=Txt2VecConfig)
    vec2wav: Vec2WavConfig = Field(default_factory=Vec2WavConfig)
    training_txt2vec: TrainConfig = Field(
        default_factory=lambda: TrainConfig(
            stage="txt2vec", steps=3000, batch_size=16, learning_rate=1e-3
        )
    )
    training_vec2wav: TrainConfig = Field(
        default_factory=lambda: TrainConfig(
            stage="vec2wav", steps=5000, batch_size=8, learning_rate=5e-4
        )
    )
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def check_consistency(self):
        """Cross-section invariants"""
        if self.training_txt2vec.stage != "txt2vec":
            raise ValueError("training_txt2vec.stage must be 'txt2vec'")
        if self.training_vec2wav.stage != "vec2wav":
            raise ValueError("training_vec2wav.stage must be 'vec2wav'")
        if self.mel.hop != self.corpus.hop or self.pitch.hop != self.mel.hop:
            raise ValueError("mel, pitch and corpus hops must agree")
        if self.vec2wav.hop != self.mel.hop:
            raise ValueError("product of upsample_rates must equal mel hop")
        if self.txt2vec.num_units != self.codebook.num_units:
            raise ValueError("txt2vec.num_units must equal codebook size")
        if self.vec2wav.num_units != self.codebook.num_units:
            raise ValueError("vec2wav.num_units must equal codebook size")
        if self.vec2wav.num_speakers != self.corpus.num_speakers:
            raise ValueError("vec2wav.num_speakers must equal corpus size")
        if self.txt2vec.phoneme_vocab != self.corpus.phoneme_vocab:
            raise ValueError("txt2vec and corpus phoneme vocab must agree")
        if self.txt2vec.n_mels != self.mel.n_mels:
            raise ValueError("txt2vec.n_mels must equal mel.n_mels")
        return self

    @property
    def artifacts(self) -> ArtifactPaths:
        """Artifact layout under paths.workdir"""
        return ArtifactPaths(self.paths.workdir)


def load_global_config(
    path: Path,
    seed: Optional[int] = None,
    workdir: Optional[Path] = None,
) -> GlobalConfig:
    """
    Reads a GlobalConfig JSON file and applies the permitted overrides.
    Parameters
    ----------
    path : Path
    seed : Optional[int]
      Overrides the top-level seed, the perturbation seed and both training
      seeds
    workdir : Optional[Path]
      Overrides paths.workdir

    Returns
    -------
    GlobalConfig

    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must contain a JSON object")
    if workdir is not None:
        raw.setdefault("paths", {})["workdir"] = str(workdir)
    config = GlobalConfig.model_validate(raw)
    if seed is not None:
        config = config.model_copy(
            update={
                "seed": seed,
                "perturbation": config.perturbation.model_copy(
                    update={"seed": seed}
                ),
                "training_txt2vec": config.training_txt2vec.model_copy(
                    update={"seed": seed}
                ),
                "training_vec2wav": config.training_vec2wav.model_copy(
                    update={"seed": seed}
                ),
            }
        )
    parent = config.paths.workdir.resolve().parent
    if not parent.is_dir():
        raise ConfigurationError(
            f"Parent of workdir {config.paths.workdir} does not exist"
        )
    return config
