"""
Reference encoders trained once and then frozen: a k-means unit codebook
over mel frames, and convolutional speaker and emotion classifiers whose
penultimate layer provides the embeddings.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from xling_emotion_tts.audio_dsp import (
    LogMelSpectrogram,
    MelSpectrogram,
    Waveform,
    load_wav,
    mel_spectrogram,
)
from xling_emotion_tts.checkpoints import load_checkpoint, save_checkpoint
from xling_emotion_tts.configs import EncoderConfig, MelConfig
from xling_emotion_tts.corpus import ManifestRecord
from xling_emotion_tts.exceptions import CheckpointError, ConfigurationError

LABEL_FIELDS = ("speaker_id", "emotion_id")
ENCODER_KINDS = {
    "speaker_id": "speaker_encoder",
    "emotion_id": "emotion_encoder",
}
DISTANCE_CHUNK = 1024


@dataclass(eq=False)
class UnitCodebook:
    """K x n_mels centroids"""

    codes: np.ndarray
    fitted: bool = False
    inertia_history: List[float] = field(default_factory=list)

    @property
    def num_units(self) -> int:
        """K"""
        return self.codes.shape[0]


@dataclass(eq=False)
class UnitSequence:
    """Frame-rate sequence of codebook indices"""

    units: np.ndarray
    frame_hop: int

    def __len__(self) -> int:
        """Number of frames"""
        return int(self.units.shape[0])


@dataclass(eq=False)
class ReferenceEmbedding:
    """Fixed-size vector from a frozen encoder"""

    vector: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        """Vector must be finite"""
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"{self.source_id}: embedding is not finite")


class EmotionEmbedding(ReferenceEmbedding):
    """E: output of the emotion encoder"""


class SpeakerEmbedding(ReferenceEmbedding):
    """Output of the speaker encoder"""

    def __post_init__(self):
        """Vector must be finite with a positive norm"""
        super().__post_init__()
        if np.linalg.norm(self.vector) == 0:
            raise ValueError(f"{self.source_id}: speaker embedding is zero")


def squared_distances(frames: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """
    Exact squared Euclidean distances, computed in row chunks.
    Parameters
    ----------
    frames : np.ndarray
      N x D
    codes : np.ndarray
      K x D

    Returns
    -------
    np.ndarray
      N x K

    """
    out = np.empty((frames.shape[0], codes.shape[0]))
    for start in range(0, frames.shape[0], DISTANCE_CHUNK):
        chunk = frames[start : start + DISTANCE_CHUNK]
        diff = chunk[:, None, :] - codes[None, :, :]
        out[start : start + DISTANCE_CHUNK] = np.einsum(
            "nkd,nkd->nk", diff, diff
        )
    return out


def _kmeans_plus_plus(
    frames: np.ndarray, num_units: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ seeding"""
    centers = [frames[rng.integers(frames.shape[0])]]
    closest = squared_distances(frames, np.asarray(centers))[:, 0]
    for _ in range(1, num_units):
        probabilities = closest / closest.sum()
        index = rng.choice(frames.shape[0], p=probabilities)
        centers.append(frames[index])
        closest = np.minimum(
            closest, squared_distances(frames, frames[index][None, :])[:, 0]
        )
    return np.asarray(centers, dtype=np.float64)


def _lloyd(
    frames: np.ndarray, codes: np.ndarray, max_iter: int
) -> Tuple[np.ndarray, List[float]]:
    """Lloyd iterations from the given codes. Returns the codes and the
    inertia after every assignment step."""
    assignment = None
    history = []
    for iteration in range(max_iter):
        distances = squared_distances(frames, codes)
        new_assignment = np.argmin(distances, axis=1)
        inertia = float(
            distances[np.arange(frames.shape[0]), new_assignment].sum()
        )
        history.append(inertia)
        logging.debug(f"k-means iteration {iteration}: inertia {inertia}")
        if assignment is not None and np.array_equal(
            assignment, new_assignment
        ):
            break
        assignment = new_assignment
        for unit in range(codes.shape[0]):
            members = frames[assignment == unit]
            if members.shape[0]:
                codes[unit] = members.mean(axis=0)
    return codes, history


def _transfer_frames(
    frames: np.ndarray, codes: np.ndarray, max_sweeps: int
) -> Tuple[np.ndarray, List[float]]:
    """
    Moves single frames between clusters while a move lowers the inertia,
    accounting for both centroid updates. Returns the codes and the exact
    inertia after every sweep.
    """
    num_units = codes.shape[0]
    assignment = np.argmin(squared_distances(frames, codes), axis=1)
    counts = np.bincount(assignment, minlength=num_units).astype(np.float64)
    for unit in np.flatnonzero(counts):
        codes[unit] = frames[assignment == unit].mean(axis=0)
    history = []
    for sweep in range(max_sweeps):
        moved = 0
        for index, frame in enumerate(frames):
            source = assignment[index]
            if counts[source] <= 1:
                continue
            squared = ((codes - frame) ** 2).sum(axis=1)
            removal = counts[source] / (counts[source] - 1) * squared[source]
            addition = counts / (counts + 1) * squared
            addition[source] = np.inf
            target = int(np.argmin(addition))
            if addition[target] >= removal * (1.0 - 1e-9):
                continue
            codes[source] = (counts[source] * codes[source] - frame) / (
                counts[source] - 1
            )
            codes[target] = (counts[target] * codes[target] + frame) / (
                counts[target] + 1
            )
            counts[source] -= 1
            counts[target] += 1
            assignment[index] = target
            moved += 1
        for unit in np.flatnonzero(counts):
            codes[unit] = frames[assignment == unit].mean(axis=0)
        inertia = float(((frames - codes[assignment]) ** 2).sum())
        history.append(inertia)
        logging.debug(
            f"k-means transfer sweep {sweep}: {moved} moves, "
            f"inertia {inertia}"
        )
        if not moved:
            break
    return codes, history


def fit_codebook(
    frames: np.ndarray,
    num_units: int,
    seed: int,
    max_iter: int = 100,
    n_init: int = 10,
) -> UnitCodebook:
    """
    k-means from n_init k-means++ seedings. Each run applies Lloyd
    iterations, then single-frame transfers until no transfer lowers the
    inertia; the run with the lowest final inertia is kept. Inertia is
    recorded after every step of that run and never increases; a cluster
    left empty by Lloyd keeps its previous centroid.
    Parameters
    ----------
    frames : np.ndarray
      N x n_mels
    num_units : int
      K
    seed : int
    max_iter : int
      Bound on Lloyd iterations and on transfer sweeps
    n_init : int
      Number of seedings

    Returns
    -------
    UnitCodebook

    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frames must be an N x D matrix")
    if n_init < 1:
        raise ValueError(f"n_init must be >= 1, got {n_init}")
    distinct = np.unique(frames, axis=0).shape[0]
    if distinct < num_units:
        raise ValueError(
            f"Need at least {num_units} distinct frames to fit {num_units} "
            f"units, found {distinct}"
        )
    rng = np.random.default_rng(seed)
    best_codes, best_history = None, None
    for run in range(n_init):
        codes, history = _lloyd(
            frames, _kmeans_plus_plus(frames, num_units, rng), max_iter
        )
        codes, transfers = _transfer_frames(frames, codes, max_iter)
        history = history + transfers
        logging.debug(f"k-means run {run}: final inertia {history[-1]}")
        if best_history is None or history[-1] < best_history[-1]:
            best_codes, best_history = codes, history
    return UnitCodebook(
        codes=best_codes, fitted=True, inertia_history=best_history
    )


def encode_units(
    mel: Union[MelSpectrogram, np.ndarray], codebook: UnitCodebook
) -> UnitSequence:
    """
    Maps every frame to its nearest code, ties going to the lowest index.
    Parameters
    ----------
    mel : Union[MelSpectrogram, np.ndarray]
    codebook : UnitCodebook

    Returns
    -------
    UnitSequence

    """
    if not codebook.fitted:
        raise ConfigurationError("Codebook is not fitted")
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    hop = mel.hop if isinstance(mel, MelSpectrogram) else 256
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != codebook.codes.shape[1]:
        raise ValueError(
            f"Mel frames of shape {frames.shape} do not match codebook "
            f"dimension {codebook.codes.shape[1]}"
        )
    units = np.argmin(squared_distances(frames, codebook.codes), axis=1)
    return UnitSequence(units=units.astype(np.int64), frame_hop=hop)


def save_codebook(
    codebook: UnitCodebook,
    path: Union[Path, str],
    seed: int,
    config: Dict,
) -> str:
    """Writes a codebook checkpoint; returns its digest"""
    return save_checkpoint(
        path,
        kind="codebook",
        state={
            "codes": torch.from_numpy(codebook.codes),
            "inertia_history": list(codebook.inertia_history),
        },
        config=config,
        seed=seed,
        trained=codebook.fitted,
    )


def load_codebook(path: Union[Path, str]) -> UnitCodebook:
    """Reads a fitted codebook checkpoint"""
    checkpoint = load_checkpoint(
        path, expected_kind="codebook", require_trained=True
    )
    return UnitCodebook(
        codes=checkpoint.state["codes"].numpy().astype(np.float64),
        fitted=True,
        inertia_history=list(checkpoint.state["inertia_history"]),
    )


def compute_mels(
    records: Sequence[ManifestRecord],
    manifest_dir: Union[Path, str],
    mel_config: MelConfig,
) -> Dict[str, np.ndarray]:
    """
    Log-mel frames of every record.
    Parameters
    ----------
    records : Sequence[ManifestRecord]
    manifest_dir : Union[Path, str]
    mel_config : MelConfig

    Returns
    -------
    Dict[str, np.ndarray]
      utterance_id -> T x n_mels

    """
    mels = {}
    total = len(records)
    for counter, record in enumerate(records, start=1):
        logging.debug(f"Mel of {record.utterance_id}. On {counter} of {total}")
        try:
            waveform = load_wav(record.resolve_wav(manifest_dir))
        except (OSError, RuntimeError) as e:
            raise type(e)(f"{record.utterance_id}: {e}") from e
        mels[record.utterance_id] = mel_spectrogram(
            waveform, mel_config
        ).frames
    return mels


class ClassifierEncoder(nn.Module):
    """Convolutional classifier over log-mel frames. Masked mean pooling
    over time is followed by a tanh embedding layer and a linear
    classification head."""

    def __init__(
        self,
        num_classes: int,
        config: EncoderConfig,
        mel_config: MelConfig,
        sample_rate: int,
        label_field: str,
    ):
        """
        Class constructor for ClassifierEncoder.

        Parameters
        ----------
        num_classes : int
        config : EncoderConfig
        mel_config : MelConfig
        sample_rate : int
        label_field : str
          'speaker_id' or 'emotion_id'. The speaker encoder removes the
          utterance's mean log level; the emotion encoder keeps it, since
          loudness is part of emotional prosody.
        """
        super().__init__()
        if label_field not in LABEL_FIELDS:
            raise ConfigurationError(
                f"label_field must be one of {LABEL_FIELDS}, got {label_field}"
            )
        self.num_classes = num_classes
        self.config = config
        self.label_field = label_field
        self.normalize_level = label_field == "speaker_id"
        channels = config.channels
        self.convs = nn.ModuleList()
        in_channels = mel_config.n_mels
        for dilation in (1, 2, 4):
            self.convs.append(
                nn.Conv1d(
                    in_channels,
                    channels,
                    config.kernel_size,
                    padding=dilation * (config.kernel_size // 2),
                    dilation=dilation,
                )
            )
            in_channels = channels
        self.embedding = nn.Linear(channels, config.embed_dim)
        self.classifier = nn.Linear(config.embed_dim, num_classes)
        self.front_end = LogMelSpectrogram(mel_config, sample_rate)

    @property
    def kind(self) -> str:
        """Checkpoint kind"""
        return ENCODER_KINDS[self.label_field]

    def embed_mel(
        self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        mel : torch.Tensor
          (B, T, n_mels)
        lengths : Optional[torch.Tensor]
          Valid frames per item; all frames when omitted

        Returns
        -------
        torch.Tensor
          (B, embed_dim)

        """
        mel = mel.to(self.embedding.weight.dtype)
        batch, frames, _ = mel.shape
        if lengths is None:
            lengths = torch.full((batch,), frames, device=mel.device)
        mask = (
            torch.arange(frames, device=mel.device)[None, :]
            < lengths[:, None]
        ).to(mel.dtype)
        counts = mask.sum(dim=1).clamp(min=1.0)
        if self.normalize_level:
            level = (mel * mask[..., None]).sum(dim=(1, 2)) / (
                counts * mel.shape[2]
            )
            mel = mel - level[:, None, None]
        x = mel.transpose(1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        pooled = (x * mask[:, None, :]).sum(dim=2) / counts[:, None]
        return torch.tanh(self.embedding(pooled))

    def forward(
        self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Class logits (B, num_classes)"""
        return self.classifier(self.embed_mel(mel, lengths))

    def embed_waveform(self, samples: torch.Tensor) -> torch.Tensor:
        """Differentiable embedding of raw audio (B, N) -> (B, embed_dim)"""
        return self.embed_mel(self.front_end(samples))


@dataclass
class TrainedEncoder:
    """Encoder with its final training accuracy"""

    encoder: ClassifierEncoder
    train_accuracy: float


def _labels(records: Sequence[ManifestRecord], label_field: str) -> np.ndarray:
    """Label column of the records"""
    if label_field not in LABEL_FIELDS:
        raise ConfigurationError(
            f"label_field must be one of {LABEL_FIELDS}, got {label_field}"
        )
    return np.array([getattr(r, label_field) for r in records], dtype=np.int64)


def _crop_batch(
    mels: List[np.ndarray],
    indices: np.ndarray,
    crop_frames: int,
    rng: np.random.Generator,
):
    """Random fixed-length crops, zero padded, with valid lengths"""
    n_mels = mels[0].shape[1]
    batch = np.zeros((len(indices), crop_frames, n_mels), dtype=np.float32)
    lengths = np.zeros(len(indices), dtype=np.int64)
    for row, index in enumerate(indices):
        mel = mels[index]
        start = int(rng.integers(0, max(1, mel.shape[0] - crop_frames + 1)))
        crop = mel[start : start + crop_frames]
        batch[row, : crop.shape[0]] = crop
        lengths[row] = crop.shape[0]
    return torch.from_numpy(batch), torch.from_numpy(lengths)


def classify_mels(
    encoder: ClassifierEncoder, mels: Sequence[np.ndarray]
) -> np.ndarray:
    """Predicted class of each full-length mel"""
    predictions = []
    with torch.no_grad():
        for mel in mels:
            logits = encoder(torch.from_numpy(np.asarray(mel))[None])
            predictions.append(int(torch.argmax(logits, dim=1)[0]))
    return np.array(predictions, dtype=np.int64)


def train_classifier_encoder(
    records: Sequence[ManifestRecord],
    mels: Dict[str, np.ndarray],
    label_field: str,
    config: EncoderConfig,
    seed: int,
    mel_config: MelConfig,
    sample_rate: int,
) -> TrainedEncoder:
    """
    Trains a speaker or emotion classifier on random mel crops.
    Parameters
    ----------
    records : Sequence[ManifestRecord]
    mels : Dict[str, np.ndarray]
      Log-mel frames keyed by utterance id, see compute_mels
    label_field : str
      'speaker_id' or 'emotion_id'
    config : EncoderConfig
    seed : int
    mel_config : MelConfig
    sample_rate : int

    Returns
    -------
    TrainedEncoder
      Encoder in eval mode with gradients disabled

    """
    labels = _labels(records, label_field)
    if np.unique(labels).size < 2:
        raise ConfigurationError(
            f"Training a {label_field} classifier needs at least 2 labels, "
            f"found {np.unique(labels).tolist()}"
        )
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    mel_list = [mels[r.utterance_id].astype(np.float32) for r in records]
    encoder = ClassifierEncoder(
        num_classes=int(labels.max()) + 1,
        config=config,
        mel_config=mel_config,
        sample_rate=sample_rate,
        label_field=label_field,
    )
    optimizer = torch.optim.Adam(encoder.parameters(), lr=config.learning_rate)
    label_tensor = torch.from_numpy(labels)
    encoder.train()
    for step in range(config.steps):
        indices = rng.integers(0, len(mel_list), size=config.batch_size)
        batch, lengths = _crop_batch(
            mel_list, indices, config.crop_frames, rng
        )
        loss = F.cross_entropy(
            encoder(batch, lengths), label_tensor[torch.from_numpy(indices)]
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 50 == 0:
            logging.debug(f"{label_field} encoder step {step}: loss {loss}")
    freeze(encoder)
    accuracy = float(np.mean(classify_mels(encoder, mel_list) == labels))
    logging.info(f"{label_field} encoder train accuracy {accuracy:.3f}")
    return TrainedEncoder(encoder=encoder, train_accuracy=accuracy)


def freeze(module: nn.Module) -> nn.Module:
    """Eval mode, no gradients"""
    module.eval()
    for parameter in module.parameters():
        parameter.requires_grad_(False)
    return module


def save_encoder(
    encoder: ClassifierEncoder,
    path: Union[Path, str],
    seed: int,
    mel_config: MelConfig,
    sample_rate: int,
    metadata: Optional[Dict] = None,
) -> str:
    """Writes an encoder checkpoint; returns its digest"""
    return save_checkpoint(
        path,
        kind=encoder.kind,
        state={
            name: tensor
            for name, tensor in encoder.state_dict().items()
            if not name.startswith("front_end.")
        },
        config={
            "encoder": encoder.config.model_dump(mode="json"),
            "mel": mel_config.model_dump(mode="json"),
            "sample_rate": sample_rate,
            "num_classes": encoder.num_classes,
            "label_field": encoder.label_field,
        },
        seed=seed,
        metadata=metadata,
    )


def load_encoder(
    path: Union[Path, str], expected_kind: Optional[str] = None
) -> ClassifierEncoder:
    """
    Reads a frozen encoder checkpoint.
    Parameters
    ----------
    path : Union[Path, str]
    expected_kind : Optional[str]
      'speaker_encoder' or 'emotion_encoder'

    Returns
    -------
    ClassifierEncoder

    """
    checkpoint = load_checkpoint(
        path, expected_kind=expected_kind, require_trained=True
    )
    if checkpoint.kind not in ENCODER_KINDS.values():
        raise CheckpointError(f"{path} is a {checkpoint.kind} checkpoint")
    config = checkpoint.config
    encoder = ClassifierEncoder(
        num_classes=config["num_classes"],
        config=EncoderConfig.model_validate(config["encoder"]),
        mel_config=MelConfig.model_validate(config["mel"]),
        sample_rate=config["sample_rate"],
        label_field=config["label_field"],
    )
    encoder.load_state_dict(checkpoint.state, strict=False)
    return freeze(encoder)


def embed(
    waveform: Waveform, encoder: ClassifierEncoder, source_id: str = ""
) -> ReferenceEmbedding:
    """
    Embedding of one waveform by a frozen encoder.
    Parameters
    ----------
    waveform : Waveform
    encoder : ClassifierEncoder
    source_id : str

    Returns
    -------
    ReferenceEmbedding
      SpeakerEmbedding or EmotionEmbedding depending on the encoder

    """
    with torch.no_grad():
        vector = encoder.embed_waveform(
            torch.from_numpy(waveform.samples)[None]
        )[0]
    cls = SpeakerEmbedding if encoder.label_field == "speaker_id" else (
        EmotionEmbedding
    )
    return cls(vector=vector.double().numpy(), source_id=source_id)


def predict_label(waveform: Waveform, encoder: ClassifierEncoder) -> int:
    """Most likely class of one waveform"""
    with torch.no_grad():
        mel = encoder.front_end(torch.from_numpy(waveform.samples)[None])
        return int(torch.argmax(encoder(mel), dim=1)[0])
