"""
Two-stage training: per-utterance feature preparation, the step-keyed batch
schedule, the JSON-lines RunLog and resumable trainers for txt2vec and
vec2wav.
"""

import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from time import time
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from xling_emotion_tts.audio_dsp import (
    PitchTrack,
    Waveform,
    extract_pitch,
    frame_energy,
    get_mel_front_end,
    load_wav,
    mel_spectrogram,
)
from xling_emotion_tts.checkpoints import (
    config_hash,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)
from xling_emotion_tts.configs import (
    GlobalConfig,
    MelConfig,
    PerturbationMode,
    PerturbationSpec,
    PitchConfig,
    TrainConfig,
    Txt2VecConfig,
    Vec2WavConfig,
)
from xling_emotion_tts.corpus import (
    ManifestRecord,
    derive_rng,
    read_manifest,
    split_records,
)
from xling_emotion_tts.exceptions import (
    CheckpointError,
    EncoderMismatchError,
    MissingArtifactError,
)
from xling_emotion_tts.perturbation import (
    STREAM_E,
    STREAM_R,
    get_perturber,
    perturbation_rng,
    read_pairs,
)
from xling_emotion_tts.ref_encoders import (
    ClassifierEncoder,
    UnitCodebook,
    embed,
    encode_units,
    load_codebook,
    load_encoder,
)
from xling_emotion_tts.txt2vec import (
    Txt2Vec,
    Txt2VecBatch,
    VarianceValues,
    load_txt2vec_state,
    txt2vec_loss,
)
from xling_emotion_tts.vec2wav import (
    Vec2Wav,
    load_vec2wav_state,
    vec2wav_loss,
)

ENERGY_FLOOR = 1e-5
TXT2VEC_KIND = "txt2vec"
VEC2WAV_KIND = "vec2wav"


@dataclass(eq=False)
class UtteranceFeatures:
    """Clean-audio features of one utterance on the shared frame grid"""

    record: ManifestRecord
    samples: np.ndarray
    mel: np.ndarray
    units: np.ndarray
    log_pitch: np.ndarray
    log_energy: np.ndarray
    pitch_track: PitchTrack
    median_pitch: float

    @property
    def num_frames(self) -> int:
        """Frames of the utterance"""
        return int(self.mel.shape[0])

    @property
    def pitch_frames(self) -> np.ndarray:
        """Phoneme log pitch expanded to frames"""
        return np.repeat(self.log_pitch, self.record.durations)

    @property
    def energy_frames(self) -> np.ndarray:
        """Phoneme log energy expanded to frames"""
        return np.repeat(self.log_energy, self.record.durations)


@dataclass(eq=False)
class Vec2WavInputs:
    """Perturbed-stream inputs of one utterance: units tokenized from the
    R copy and the emotion embedding of the E copy"""

    units: np.ndarray
    emotion: np.ndarray


@dataclass
class TrainResult:
    """Outcome of one train_stage call"""

    checkpoint_path: Path
    digest: str
    losses: List[float] = field(default_factory=list)
    steps_completed: int = 0

    @property
    def final_loss(self) -> float:
        """Total loss of the last step"""
        return self.losses[-1] if self.losses else math.nan


def phoneme_prosody(
    f0: np.ndarray,
    energy: np.ndarray,
    durations: Sequence[int],
    median_pitch: float,
    pitch_floor: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Phoneme-level log F0 and log energy. Log F0 averages the voiced frames
    of each phoneme; a phoneme without voiced frames takes the utterance
    median (or pitch_floor when nothing is voiced).
    Parameters
    ----------
    f0 : np.ndarray
      Frame F0, 0 on unvoiced frames
    energy : np.ndarray
      Frame RMS
    durations : Sequence[int]
    median_pitch : float
    pitch_floor : float

    Returns
    -------
    Tuple[np.ndarray, np.ndarray]

    """
    bounds = np.concatenate([[0], np.cumsum(durations)]).astype(int)
    if bounds[-1] != f0.size or bounds[-1] != energy.size:
        raise ValueError(
            f"Durations cover {bounds[-1]} frames but the tracks have "
            f"{f0.size} pitch and {energy.size} energy frames"
        )
    fallback = math.log(median_pitch if median_pitch > 0 else pitch_floor)
    log_pitch = np.full(len(durations), fallback)
    log_energy = np.zeros(len(durations))
    for index, (start, end) in enumerate(zip(bounds[:-1], bounds[1:])):
        segment = f0[start:end]
        voiced = segment[segment > 0]
        if voiced.size:
            log_pitch[index] = float(np.mean(np.log(voiced)))
        log_energy[index] = math.log(
            max(float(np.mean(energy[start:end])), ENERGY_FLOOR)
        )
    return log_pitch, log_energy


def prepare_features(
    records: Sequence[ManifestRecord],
    manifest_dir: Union[Path, str],
    codebook: UnitCodebook,
    mel_config: MelConfig,
    pitch_config: PitchConfig,
) -> List[UtteranceFeatures]:
    """
    Loads each clean utterance and computes its mel, ground-truth units and
    phoneme-level prosody.
    Parameters
    ----------
    records : Sequence[ManifestRecord]
    manifest_dir : Union[Path, str]
    codebook : UnitCodebook
    mel_config : MelConfig
    pitch_config : PitchConfig

    Returns
    -------
    List[UtteranceFeatures]

    """
    features = []
    total = len(records)
    for counter, record in enumerate(records, start=1):
        logging.debug(
            f"Features of {record.utterance_id}. On {counter} of {total}"
        )
        try:
            waveform = load_wav(record.resolve_wav(manifest_dir))
        except (OSError, RuntimeError) as e:
            raise type(e)(f"{record.utterance_id}: {e}") from e
        mel = mel_spectrogram(waveform, mel_config)
        track, median_pitch = extract_pitch(waveform, pitch_config)
        energy = frame_energy(waveform, mel_config.hop, mel_config.win)
        if mel.num_frames != record.total_frames:
            raise ValueError(
                f"{record.utterance_id}: {mel.num_frames} mel frames but "
                f"durations sum to {record.total_frames}"
            )
        log_pitch, log_energy = phoneme_prosody(
            track.f0, energy, record.durations, median_pitch, pitch_config.fmin
        )
        features.append(
            UtteranceFeatures(
                record=record,
                samples=waveform.samples.astype(np.float32),
                mel=mel.frames.astype(np.float32),
                units=encode_units(mel, codebook).units,
                log_pitch=log_pitch,
                log_energy=log_energy,
                pitch_track=track,
                median_pitch=median_pitch,
            )
        )
    return features


def stream_inputs(
    r_waveform: Waveform,
    e_waveform: Waveform,
    codebook: UnitCodebook,
    emotion_encoder: ClassifierEncoder,
    mel_config: MelConfig,
    num_frames: int,
) -> Vec2WavInputs:
    """Units of the R copy and emotion embedding of the E copy, trimmed or
    edge-padded to num_frames"""
    units = encode_units(mel_spectrogram(r_waveform, mel_config), codebook)
    unit_ids = units.units[:num_frames]
    if unit_ids.size < num_frames:
        unit_ids = np.pad(unit_ids, (0, num_frames - unit_ids.size), "edge")
    emotion = embed(e_waveform, emotion_encoder).vector
    return Vec2WavInputs(units=unit_ids, emotion=emotion.astype(np.float32))


def batch_schedule(
    seed: int, step: int, num_items: int, batch_size: int
) -> Tuple[np.ndarray, int]:
    """
    Indices of the batch at a step and the epoch it belongs to. Every epoch
    is a seeded permutation of the items, so a batch depends only on
    (seed, step).
    Parameters
    ----------
    seed : int
    step : int
      0-based optimizer step
    num_items : int
    batch_size : int

    Returns
    -------
    Tuple[np.ndarray, int]

    """
    if num_items < 1:
        raise ValueError("Training needs at least one utterance")
    steps_per_epoch = math.ceil(num_items / batch_size)
    epoch = step // steps_per_epoch
    order = derive_rng(seed, "batches", epoch).permutation(num_items)
    start = (step % steps_per_epoch) * batch_size
    indices = np.resize(np.roll(order, -start), batch_size)
    return indices, epoch


class RunLog:
    """Append-only JSON-lines log of one training run"""

    def __init__(self, path: Union[Path, str]):
        """
        Class constructor for RunLog.

        Parameters
        ----------
        path : Union[Path, str]
        """
        self.path = Path(path)

    def append(self, event: str, **fields: Any) -> Dict[str, Any]:
        """Writes one event line and returns it"""
        entry = {"event": event, "timestamp": time(), **fields}
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def read(self) -> List[Dict[str, Any]]:
        """All events in order"""
        if not self.path.is_file():
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def step_losses(self) -> List[Dict[str, Any]]:
        """Step events only"""
        return [e for e in self.read() if e["event"] == "step"]


def verify_digests(
    recorded: Dict[str, str], artifacts: Dict[str, Path]
) -> None:
    """
    Raises EncoderMismatchError if a frozen artifact changed since a
    downstream checkpoint recorded its digest.
    Parameters
    ----------
    recorded : Dict[str, str]
      Artifact name -> sha256 stored in checkpoint metadata
    artifacts : Dict[str, Path]
      Artifact name -> current file

    """
    for name, path in artifacts.items():
        expected = recorded.get(name)
        if expected is None:
            continue
        if not Path(path).is_file():
            raise MissingArtifactError(name, path)
        actual = file_digest(path)
        if actual != expected:
            raise EncoderMismatchError(
                f"{name} at {path} has digest {actual[:12]} but the "
                f"checkpoint was trained against {expected[:12]}"
            )


class StageTrainer(ABC):
    """Shared optimization loop with checkpointing and resume"""

    kind: str = ""

    def __init__(
        self,
        train_config: TrainConfig,
        model_config: Union[Txt2VecConfig, Vec2WavConfig],
        checkpoint_path: Union[Path, str],
        runlog_path: Union[Path, str],
        metadata: Optional[Dict[str, Any]] = None,
        snapshot: Optional[Dict[str, Any]] = None,
    ):
        """
        Class constructor for StageTrainer.

        Parameters
        ----------
        train_config : TrainConfig
        model_config : Union[Txt2VecConfig, Vec2WavConfig]
        checkpoint_path : Union[Path, str]
        runlog_path : Union[Path, str]
        metadata : Optional[Dict[str, Any]]
          Digests of upstream artifacts, stored in the checkpoint
        snapshot : Optional[Dict[str, Any]]
          Extra configuration recorded with the run (mel, sample rate)
        """
        self.train_config = train_config
        self.model_config = model_config
        self.checkpoint_path = Path(checkpoint_path)
        self.runlog = RunLog(runlog_path)
        self.metadata = metadata or {}
        self.snapshot = snapshot or {}

    @property
    def checkpoint_config(self) -> Dict[str, Any]:
        """Configuration stored in and hashed by the checkpoint"""
        return {
            "model": self.model_config.model_dump(mode="json"),
            "train": self.train_config.model_dump(mode="json"),
            **self.snapshot,
        }

    @abstractmethod
    def build_model(self) -> torch.nn.Module:
        """Freshly initialized model"""

    @abstractmethod
    def compute_loss(
        self, model: torch.nn.Module, step: int
    ) -> Dict[str, torch.Tensor]:
        """Loss components of one step; 'total' is optimized"""

    def _save(
        self,
        model: torch.nn.Module,
        optimizer: torch.optim.Optimizer,
        step: int,
        history: List[float],
    ) -> str:
        """Writes the resumable checkpoint"""
        return save_checkpoint(
            self.checkpoint_path,
            kind=self.kind,
            state={
                "model": model.state_dict(),
                "optimizer": optimizer.state_dict(),
                "torch_rng": torch.get_rng_state(),
                "step": step,
                "history": list(history),
            },
            config=self.checkpoint_config,
            seed=self.train_config.seed,
            trained=step >= self.train_config.steps,
            metadata={**self.metadata, "step": step},
        )

    def _restore(
        self, model: torch.nn.Module, optimizer: torch.optim.Optimizer
    ) -> Tuple[int, List[float]]:
        """Loads a partial run written by this trainer's configuration"""
        checkpoint = load_checkpoint(
            self.checkpoint_path, expected_kind=self.kind
        )
        if checkpoint.config_hash != config_hash(self.checkpoint_config):
            raise CheckpointError(
                f"{self.checkpoint_path} was written with a different "
                "configuration; remove it to start over"
            )
        for name, digest in self.metadata.items():
            if checkpoint.metadata.get(name) != digest:
                raise EncoderMismatchError(
                    f"{name} changed since {self.checkpoint_path} was written"
                )
        model.load_state_dict(checkpoint.state["model"])
        optimizer.load_state_dict(checkpoint.state["optimizer"])
        torch.set_rng_state(checkpoint.state["torch_rng"])
        return int(checkpoint.state["step"]), list(
            checkpoint.state["history"]
        )

    def run(
        self, resume: bool = True, stop_after: Optional[int] = None
    ) -> TrainResult:
        """
        Trains to train_config.steps.
        Parameters
        ----------
        resume : bool
          Continue from an existing checkpoint of the same configuration
        stop_after : Optional[int]
          Stop (with a checkpoint) once this many steps are done

        Returns
        -------
        TrainResult

        """
        cfg = self.train_config
        if cfg.deterministic:
            torch.set_num_threads(1)
        torch.manual_seed(cfg.seed)
        model = self.build_model()
        model.train()
        optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad],
            lr=cfg.learning_rate,
            betas=tuple(cfg.adam_betas),
        )
        step, history = 0, []
        if resume and self.checkpoint_path.is_file():
            step, history = self._restore(model, optimizer)
            logging.info(f"Resuming {self.kind} from step {step}")
            self.runlog.append("resume", stage=self.kind, step=step)
        else:
            self.runlog.append(
                "start",
                stage=self.kind,
                seed=cfg.seed,
                config=self.checkpoint_config,
                config_hash=config_hash(self.checkpoint_config),
                artifacts=self.metadata,
            )
        start_time = time()
        digest = ""
        while step < cfg.steps:
            losses = self.compute_loss(model, step)
            optimizer.zero_grad()
            losses["total"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            values = {name: float(v) for name, v in losses.items()}
            history.append(values["total"])
            self.runlog.append("step", step=step, **values)
            logging.debug(f"{self.kind} step {step}: {values}")
            interrupted = stop_after is not None and step >= stop_after
            if (
                step % cfg.checkpoint_every == 0
                or step == cfg.steps
                or interrupted
            ):
                digest = self._save(model, optimizer, step, history)
            if interrupted:
                break
        if not digest:
            digest = file_digest(self.checkpoint_path)
        wall_clock = time() - start_time
        self.runlog.append(
            "end", stage=self.kind, step=step, wall_clock=wall_clock
        )
        return TrainResult(
            checkpoint_path=self.checkpoint_path,
            digest=digest,
            losses=history,
            steps_completed=step,
        )


def collate_txt2vec(items: Sequence[UtteranceFeatures]) -> Txt2VecBatch:
    """Pads utterances into one teacher-forcing batch"""
    batch = len(items)
    max_phonemes = max(len(f.record.phoneme_ids) for f in items)
    max_frames = max(f.num_frames for f in items)
    n_mels = items[0].mel.shape[1]
    phonemes = np.zeros((batch, max_phonemes), dtype=np.int64)
    durations = np.zeros((batch, max_phonemes), dtype=np.int64)
    pitch = np.zeros((batch, max_phonemes), dtype=np.float32)
    energy = np.zeros((batch, max_phonemes), dtype=np.float32)
    mel = np.zeros((batch, max_frames, n_mels), dtype=np.float32)
    units = np.zeros((batch, max_frames), dtype=np.int64)
    phoneme_lengths = np.zeros(batch, dtype=np.int64)
    frame_lengths = np.zeros(batch, dtype=np.int64)
    for row, item in enumerate(items):
        length = len(item.record.phoneme_ids)
        frames = item.num_frames
        phonemes[row, :length] = item.record.phoneme_ids
        durations[row, :length] = item.record.durations
        pitch[row, :length] = item.log_pitch
        energy[row, :length] = item.log_energy
        mel[row, :frames] = item.mel
        units[row, :frames] = item.units
        phoneme_lengths[row] = length
        frame_lengths[row] = frames
    phoneme_mask = np.arange(max_phonemes)[None, :] < phoneme_lengths[:, None]
    frame_mask = np.arange(max_frames)[None, :] < frame_lengths[:, None]
    return Txt2VecBatch(
        phoneme_ids=torch.from_numpy(phonemes),
        phoneme_mask=torch.from_numpy(phoneme_mask),
        language_ids=torch.tensor(
            [f.record.language_id for f in items], dtype=torch.long
        ),
        durations=torch.from_numpy(durations),
        pitch=torch.from_numpy(pitch),
        energy=torch.from_numpy(energy),
        reference_mel=torch.from_numpy(mel),
        mel_lengths=torch.from_numpy(frame_lengths),
        units=torch.from_numpy(units),
        frame_mask=torch.from_numpy(frame_mask),
    )


class Txt2VecTrainer(StageTrainer):
    """Stage 1 on clean-audio units with teacher forcing"""

    kind = TXT2VEC_KIND

    def __init__(self, features: Sequence[UtteranceFeatures], *args, **kwargs):
        """
        Class constructor for Txt2VecTrainer.

        Parameters
        ----------
        features : Sequence[UtteranceFeatures]
          Training utterances
        args, kwargs
          Forwarded to StageTrainer
        """
        super().__init__(*args, **kwargs)
        self.features = list(features)

    def build_model(self) -> Txt2Vec:
        """Fresh Txt2Vec"""
        return Txt2Vec(self.model_config)

    def compute_loss(
        self, model: torch.nn.Module, step: int
    ) -> Dict[str, torch.Tensor]:
        """Teacher-forced loss of the scheduled batch"""
        indices, _ = batch_schedule(
            self.train_config.seed,
            step,
            len(self.features),
            self.train_config.batch_size,
        )
        batch = collate_txt2vec([self.features[i] for i in indices])
        outputs = model(batch)
        targets = VarianceValues(
            pitch=batch.pitch,
            energy=batch.energy,
            duration=torch.log(batch.durations.clamp(min=1).float()),
        )
        return txt2vec_loss(
            outputs.logits,
            batch.units,
            outputs.variances,
            targets,
            frame_mask=batch.frame_mask,
            phoneme_mask=batch.phoneme_mask,
        )


class Vec2WavTrainer(StageTrainer):
    """Stage 2: perturbed-stream units and emotion embedding to the clean
    waveform, with the speaker consistency loss"""

    kind = VEC2WAV_KIND

    def __init__(
        self,
        features: Sequence[UtteranceFeatures],
        inputs: Optional[Dict[str, Vec2WavInputs]],
        codebook: UnitCodebook,
        emotion_encoder: ClassifierEncoder,
        speaker_encoder: Optional[ClassifierEncoder],
        mel_config: MelConfig,
        sample_rate: int,
        perturbation: PerturbationSpec,
        pitch_config: PitchConfig,
        *args,
        **kwargs,
    ):
        """
        Class constructor for Vec2WavTrainer.

        Parameters
        ----------
        features : Sequence[UtteranceFeatures]
        inputs : Optional[Dict[str, Vec2WavInputs]]
          Fixed inputs per utterance id; None re-perturbs every epoch
        codebook : UnitCodebook
        emotion_encoder : ClassifierEncoder
        speaker_encoder : Optional[ClassifierEncoder]
          Frozen speaker encoder for SCL and the external speaker mode
        mel_config : MelConfig
        sample_rate : int
        perturbation : PerturbationSpec
        pitch_config : PitchConfig
        args, kwargs
          Forwarded to StageTrainer
        """
        super().__init__(*args, **kwargs)
        self.features = list(features)
        self.inputs = inputs
        self.codebook = codebook
        self.emotion_encoder = emotion_encoder
        self.speaker_encoder = speaker_encoder
        self.mel_config = mel_config
        self.sample_rate = sample_rate
        self.perturbation = perturbation
        self.pitch_config = pitch_config
        self.mel_front_end = get_mel_front_end(mel_config, sample_rate)
        self._epoch_cache: Dict[str, Vec2WavInputs] = {}
        self._cache_epoch: Optional[int] = None
        self._speaker_embeddings: Dict[str, np.ndarray] = {}

    def build_model(self) -> Vec2Wav:
        """Fresh Vec2Wav"""
        return Vec2Wav(self.model_config)

    def _epoch_inputs(
        self, item: UtteranceFeatures, epoch: int
    ) -> Vec2WavInputs:
        """Fresh dual perturbation of one utterance for an epoch"""
        if self._cache_epoch != epoch:
            self._epoch_cache = {}
            self._cache_epoch = epoch
        uid = item.record.utterance_id
        if uid not in self._epoch_cache:
            waveform = Waveform(
                samples=item.samples.astype(np.float64),
                sample_rate=self.sample_rate,
            )
            perturber = get_perturber(self.perturbation, self.pitch_config)
            pitch = (item.pitch_track, item.median_pitch)
            streams = []
            for stream in (STREAM_R, STREAM_E):
                rng = perturbation_rng(
                    self.perturbation.seed, uid, stream, epoch
                )
                streams.append(perturber.perturb(waveform, rng, pitch)[0])
            self._epoch_cache[uid] = stream_inputs(
                streams[0],
                streams[1],
                self.codebook,
                self.emotion_encoder,
                self.mel_config,
                item.num_frames,
            )
        return self._epoch_cache[uid]

    def _speaker_embedding(self, item: UtteranceFeatures) -> np.ndarray:
        """Speaker-encoder embedding of the clean utterance"""
        uid = item.record.utterance_id
        if uid not in self._speaker_embeddings:
            waveform = Waveform(
                samples=item.samples.astype(np.float64),
                sample_rate=self.sample_rate,
            )
            self._speaker_embeddings[uid] = embed(
                waveform, self.speaker_encoder
            ).vector.astype(np.float32)
        return self._speaker_embeddings[uid]

    def compute_loss(
        self, model: torch.nn.Module, step: int
    ) -> Dict[str, torch.Tensor]:
        """Reconstruction plus SCL on aligned random crops"""
        cfg = self.train_config
        indices, epoch = batch_schedule(
            cfg.seed, step, len(self.features), cfg.batch_size
        )
        items = [self.features[i] for i in indices]
        segment = min([cfg.segment_frames] + [f.num_frames for f in items])
        crop_rng = derive_rng(cfg.seed, "crops", step)
        hop = self.mel_config.hop
        units, emotion, pitch, energy = [], [], [], []
        target, external = [], []
        for item in items:
            if self.inputs is None:
                stream = self._epoch_inputs(item, epoch)
            else:
                stream = self.inputs[item.record.utterance_id]
            start = int(crop_rng.integers(0, item.num_frames - segment + 1))
            frames = slice(start, start + segment)
            units.append(stream.units[frames])
            emotion.append(stream.emotion)
            pitch.append(item.pitch_frames[frames])
            energy.append(item.energy_frames[frames])
            target.append(item.samples[start * hop : (start + segment) * hop])
            if self.model_config.speaker_mode == "external":
                external.append(self._speaker_embedding(item))
        target_tensor = torch.from_numpy(np.stack(target))
        generated = model(
            torch.from_numpy(np.stack(units)),
            torch.from_numpy(np.stack(emotion)),
            torch.from_numpy(np.stack(pitch).astype(np.float32)),
            torch.from_numpy(np.stack(energy).astype(np.float32)),
            speaker_ids=torch.tensor(
                [f.record.speaker_id for f in items], dtype=torch.long
            ),
            external_speaker=(
                torch.from_numpy(np.stack(external)) if external else None
            ),
        )
        embed_fn = (
            None
            if self.speaker_encoder is None
            else self.speaker_encoder.embed_waveform
        )
        return vec2wav_loss(
            generated,
            target_tensor,
            self.mel_front_end,
            embed_fn=embed_fn,
            alpha=cfg.scl_alpha,
        )


def _require(path: Path, artifact: str) -> Path:
    """MissingArtifactError unless path is a file"""
    if not Path(path).is_file():
        raise MissingArtifactError(artifact, path)
    return Path(path)


def precomputed_inputs(
    features: Sequence[UtteranceFeatures],
    pair_manifest: Path,
    codebook: UnitCodebook,
    emotion_encoder: ClassifierEncoder,
    mel_config: MelConfig,
) -> Dict[str, Vec2WavInputs]:
    """Inputs from the perturb stage's R and E files"""
    pairs = {p.source_id: p for p in read_pairs(pair_manifest)}
    inputs = {}
    total = len(features)
    for counter, item in enumerate(features, start=1):
        uid = item.record.utterance_id
        logging.debug(f"Perturbed inputs of {uid}. On {counter} of {total}")
        if uid not in pairs:
            raise MissingArtifactError(
                f"perturbed pair of {uid}", pair_manifest
            )
        r_path, e_path = pairs[uid].resolve(pair_manifest.parent)
        try:
            r_waveform = load_wav(_require(r_path, f"R copy of {uid}"))
            e_waveform = load_wav(_require(e_path, f"E copy of {uid}"))
        except RuntimeError as e:
            raise type(e)(f"{uid}: {e}") from e
        inputs[uid] = stream_inputs(
            r_waveform,
            e_waveform,
            codebook,
            emotion_encoder,
            mel_config,
            item.num_frames,
        )
    return inputs


def clean_inputs(
    features: Sequence[UtteranceFeatures],
    emotion_encoder: ClassifierEncoder,
    sample_rate: int,
) -> Dict[str, Vec2WavInputs]:
    """Unperturbed inputs: clean units and clean-audio emotion embedding"""
    inputs = {}
    for item in features:
        waveform = Waveform(
            samples=item.samples.astype(np.float64), sample_rate=sample_rate
        )
        inputs[item.record.utterance_id] = Vec2WavInputs(
            units=item.units,
            emotion=embed(waveform, emotion_encoder).vector.astype(
                np.float32
            ),
        )
    return inputs


def train_stage(
    config: GlobalConfig,
    stage: str,
    resume: bool = True,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """
    Trains one stage from the artifacts under the workdir.
    Parameters
    ----------
    config : GlobalConfig
    stage : str
      'txt2vec' or 'vec2wav'
    resume : bool
    stop_after : Optional[int]

    Returns
    -------
    TrainResult

    """
    artifacts = config.artifacts
    manifest = _require(artifacts.manifest, "manifest")
    codebook_path = _require(artifacts.codebook, "codebook")
    if stage == TXT2VEC_KIND:
        train_config = config.training_txt2vec
    elif stage == VEC2WAV_KIND:
        train_config = config.training_vec2wav
        emotion_path = _require(artifacts.emotion_encoder, "emotion encoder")
        speaker_path = _require(artifacts.speaker_encoder, "speaker encoder")
        if train_config.perturbation == PerturbationMode.PRECOMPUTED:
            _require(artifacts.pair_manifest, "pair manifest")
    else:
        raise ValueError(f"Unknown stage {stage}")
    records, _ = split_records(
        read_manifest(manifest), config.corpus.holdout_every
    )
    codebook = load_codebook(codebook_path)
    features = prepare_features(
        records, manifest.parent, codebook, config.mel, config.pitch
    )
    metadata = {"codebook": file_digest(codebook_path)}
    snapshot = {
        "mel": config.mel.model_dump(mode="json"),
        "sample_rate": config.sample_rate,
    }
    if stage == TXT2VEC_KIND:
        trainer = Txt2VecTrainer(
            features,
            train_config,
            config.txt2vec,
            artifacts.txt2vec,
            artifacts.txt2vec_runlog,
            metadata=metadata,
            snapshot=snapshot,
        )
        return trainer.run(resume=resume, stop_after=stop_after)
    emotion_encoder = load_encoder(emotion_path, "emotion_encoder")
    speaker_encoder = load_encoder(speaker_path, "speaker_encoder")
    metadata["emotion_encoder"] = file_digest(emotion_path)
    metadata["speaker_encoder"] = file_digest(speaker_path)
    if train_config.perturbation == PerturbationMode.PRECOMPUTED:
        inputs = precomputed_inputs(
            features,
            artifacts.pair_manifest,
            codebook,
            emotion_encoder,
            config.mel,
        )
    elif train_config.perturbation == PerturbationMode.NONE:
        inputs = clean_inputs(features, emotion_encoder, config.sample_rate)
    else:
        inputs = None
    snapshot["perturbation"] = config.perturbation.model_dump(mode="json")
    trainer = Vec2WavTrainer(
        features,
        inputs,
        codebook,
        emotion_encoder,
        speaker_encoder,
        config.mel,
        config.sample_rate,
        config.perturbation,
        config.pitch,
        train_config,
        config.vec2wav,
        artifacts.vec2wav,
        artifacts.vec2wav_runlog,
        metadata=metadata,
        snapshot=snapshot,
    )
    return trainer.run(resume=resume, stop_after=stop_after)


def load_txt2vec(path: Union[Path, str]) -> Tuple[Txt2Vec, Dict[str, Any]]:
    """Trained txt2vec model and its checkpoint metadata"""
    checkpoint = load_checkpoint(
        path, expected_kind=TXT2VEC_KIND, require_trained=True
    )
    model = load_txt2vec_state(
        Txt2VecConfig.model_validate(checkpoint.config["model"]),
        checkpoint.state["model"],
        trained=checkpoint.trained,
    )
    return model, checkpoint.metadata


def load_vec2wav(path: Union[Path, str]) -> Tuple[Vec2Wav, Dict[str, Any]]:
    """Trained vec2wav model and its checkpoint metadata"""
    checkpoint = load_checkpoint(
        path, expected_kind=VEC2WAV_KIND, require_trained=True
    )
    model = load_vec2wav_state(
        Vec2WavConfig.model_validate(checkpoint.config["model"]),
        checkpoint.state["model"],
        trained=checkpoint.trained,
    )
    return model, checkpoint.metadata
