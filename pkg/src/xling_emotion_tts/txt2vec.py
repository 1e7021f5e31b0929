"""
Stage 1: phonemes, a language id and a reference mel to discrete unit
sequences. A phoneme encoder and a mel-style encoder feed a variance
adaptor predicting per-phoneme pitch, energy and duration; the length
regulated states are decoded into unit logits.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from xling_emotion_tts.configs import Txt2VecConfig
from xling_emotion_tts.exceptions import CheckpointError, ConfigurationError
from xling_emotion_tts.ref_encoders import UnitSequence


def sinusoid_positions(
    length: int, dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal position table (length, dim)"""
    position = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(1e4) / dim)
    )
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return table.to(dtype)


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, max_len) boolean mask, True on valid positions"""
    return (
        torch.arange(max_len, device=lengths.device)[None, :]
        < lengths[:, None]
    )


@dataclass
class VarianceValues:
    """Per-phoneme log pitch, log energy and log duration, each (B, L)"""

    pitch: torch.Tensor
    energy: torch.Tensor
    duration: torch.Tensor


@dataclass
class Txt2VecBatch:
    """Padded training batch. Masks are True on valid positions."""

    phoneme_ids: torch.Tensor
    phoneme_mask: torch.Tensor
    language_ids: torch.Tensor
    durations: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    reference_mel: torch.Tensor
    mel_lengths: torch.Tensor
    units: torch.Tensor
    frame_mask: torch.Tensor


@dataclass
class Txt2VecOutputs:
    """Forward outputs under teacher forcing"""

    logits: torch.Tensor
    variances: VarianceValues
    style: torch.Tensor


@dataclass(eq=False)
class Txt2VecPrediction:
    """Inference result of one utterance"""

    units: UnitSequence
    pitch_frames: np.ndarray
    energy_frames: np.ndarray
    durations: np.ndarray
    style: np.ndarray


class TransformerStack(nn.Module):
    """Post-norm self-attention blocks with a padding mask"""

    def __init__(self, config: Txt2VecConfig, num_blocks: int):
        """
        Class constructor for TransformerStack.

        Parameters
        ----------
        config : Txt2VecConfig
        num_blocks : int
        """
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                nn.TransformerEncoderLayer(
                    d_model=config.d_model,
                    nhead=config.n_heads,
                    dim_feedforward=config.ff_dim,
                    dropout=config.dropout,
                    batch_first=True,
                )
                for _ in range(num_blocks)
            ]
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x (B, L, d), mask (B, L) True on valid positions"""
        for block in self.blocks:
            x = block(x, src_key_padding_mask=~mask)
        return x * mask[..., None].to(x.dtype)


class PhonemeEncoder(nn.Module):
    """Phoneme embedding with positions and a language embedding added at
    every position, followed by self-attention blocks"""

    def __init__(self, config: Txt2VecConfig):
        """
        Class constructor for PhonemeEncoder.

        Parameters
        ----------
        config : Txt2VecConfig
        """
        super().__init__()
        self.config = config
        self.phoneme_embedding = nn.Embedding(
            config.phoneme_vocab, config.d_model
        )
        self.language_embedding = nn.Embedding(
            config.num_languages, config.d_model
        )
        self.stack = TransformerStack(config, config.encoder_blocks)

    def check_ids(
        self, phoneme_ids: torch.Tensor, language_ids: torch.Tensor
    ) -> None:
        """Raises ConfigurationError naming the first invalid position"""
        vocab = self.config.phoneme_vocab
        invalid = (phoneme_ids < 0) | (phoneme_ids >= vocab)
        if bool(invalid.any()):
            position = invalid.nonzero()[0].tolist()
            raise ConfigurationError(
                f"Phoneme id {int(phoneme_ids[tuple(position)])} at position "
                f"{position[-1]} is outside the vocabulary of "
                f"{self.config.phoneme_vocab}"
            )
        if bool(
            ((language_ids < 0) | (language_ids >= self.config.num_languages))
            .any()
        ):
            raise ConfigurationError(
                f"Language ids {language_ids.tolist()} outside "
                f"[0, {self.config.num_languages})"
            )

    def forward(
        self,
        phoneme_ids: torch.Tensor,
        language_ids: torch.Tensor,
        mask: torch.Tensor,
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        phoneme_ids : torch.Tensor
          (B, L); padded positions may hold any valid id
        language_ids : torch.Tensor
          (B,)
        mask : torch.Tensor
          (B, L) True on valid positions

        Returns
        -------
        torch.Tensor
          (B, L, d_model)

        """
        self.check_ids(phoneme_ids.masked_fill(~mask, 0), language_ids)
        x = self.phoneme_embedding(phoneme_ids.masked_fill(~mask, 0))
        positions = sinusoid_positions(x.shape[1], x.shape[2], x.dtype)
        x = x + positions[None].to(x.device)
        x = x + self.language_embedding(language_ids)[:, None, :]
        return self.stack(x, mask)


class GatedConv(nn.Module):
    """Residual 1-D convolution with a gated linear unit"""

    def __init__(self, channels: int, kernel_size: int, dropout: float):
        """
        Class constructor for GatedConv.

        Parameters
        ----------
        channels : int
        kernel_size : int
        dropout : float
        """
        super().__init__()
        self.conv = nn.Conv1d(
            channels, 2 * channels, kernel_size, padding=kernel_size // 2
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x (B, C, T)"""
        return x + self.dropout(F.glu(self.conv(x), dim=1))


class MelStyleEncoder(nn.Module):
    """Reference mel to one global style vector: per-frame spectral layers,
    gated temporal convolutions, multi-head self-attention, then average
    pooling over valid frames"""

    def __init__(self, config: Txt2VecConfig):
        """
        Class constructor for MelStyleEncoder.

        Parameters
        ----------
        config : Txt2VecConfig
        """
        super().__init__()
        d = config.d_model
        self.spectral = nn.Sequential(
            nn.Linear(config.n_mels, d),
            nn.Mish(),
            nn.Dropout(config.dropout),
            nn.Linear(d, d),
            nn.Mish(),
            nn.Dropout(config.dropout),
        )
        self.temporal = nn.Sequential(
            GatedConv(d, config.style_kernel, config.dropout),
            GatedConv(d, config.style_kernel, config.dropout),
        )
        self.attention = nn.MultiheadAttention(
            d, config.n_heads, dropout=config.dropout, batch_first=True
        )
        self.projection = nn.Linear(d, d)

    def forward(
        self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        mel : torch.Tensor
          (B, T, n_mels)
        lengths : Optional[torch.Tensor]
          (B,) valid frames; all frames when omitted

        Returns
        -------
        torch.Tensor
          (B, d_model)

        """
        if mel.dim() != 3 or mel.shape[1] == 0:
            raise ValueError("Reference mel must have at least one frame")
        if lengths is None:
            lengths = torch.full(
                (mel.shape[0],), mel.shape[1], device=mel.device
            )
        if bool((lengths < 1).any()):
            raise ValueError("Reference mel must have at least one frame")
        mask = lengths_to_mask(lengths, mel.shape[1])
        weights = mask[..., None].to(mel.dtype)
        x = self.spectral(mel) * weights
        x = self.temporal(x.transpose(1, 2)).transpose(1, 2) * weights
        attended, _ = self.attention(x, x, x, key_padding_mask=~mask)
        x = self.projection(x + attended) * weights
        return x.sum(dim=1) / weights.sum(dim=1)


class VariancePredictor(nn.Module):
    """Two convolution layers, each with ReLU, layer norm and dropout, and
    a final linear layer producing one value per phoneme"""

    def __init__(self, config: Txt2VecConfig):
        """
        Class constructor for VariancePredictor.

        Parameters
        ----------
        config : Txt2VecConfig
        """
        super().__init__()
        d = config.d_model
        k = config.variance_kernel
        self.convs = nn.ModuleList(
            [nn.Conv1d(d, d, k, padding=k // 2) for _ in range(2)]
        )
        self.norms = nn.ModuleList([nn.LayerNorm(d) for _ in range(2)])
        self.dropout = nn.Dropout(config.dropout)
        self.linear = nn.Linear(d, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x (B, L, d) -> (B, L), zero on padding"""
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(conv(x.transpose(1, 2))).transpose(1, 2)
            x = self.dropout(norm(x))
        return self.linear(x).squeeze(-1) * mask.to(x.dtype)


def length_regulate(
    hidden: torch.Tensor, durations: torch.Tensor
) -> torch.Tensor:
    """
    Repeats row i of hidden durations[i] times, preserving order.
    Parameters
    ----------
    hidden : torch.Tensor
      (L, d)
    durations : torch.Tensor
      (L,) integers >= 1

    Returns
    -------
    torch.Tensor
      (sum(durations), d)

    """
    durations = durations.long()
    if durations.shape[0] != hidden.shape[0]:
        raise ValueError(
            f"{hidden.shape[0]} states but {durations.shape[0]} durations"
        )
    if bool((durations < 1).any()):
        raise ValueError(f"Durations must be >= 1, got {durations.tolist()}")
    return torch.repeat_interleave(hidden, durations, dim=0)


def length_regulate_batch(
    hidden: torch.Tensor,
    durations: torch.Tensor,
    mask: torch.Tensor,
    max_frames: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Batched length_regulate. Padded phonemes contribute no frames.
    Parameters
    ----------
    hidden : torch.Tensor
      (B, L, d)
    durations : torch.Tensor
      (B, L)
    mask : torch.Tensor
      (B, L) True on valid phonemes
    max_frames : Optional[int]
      Pad target; the longest item when omitted

    Returns
    -------
    Tuple[torch.Tensor, torch.Tensor]
      (B, T, d) frames and (B,) frame counts

    """
    expanded = [
        length_regulate(h[m], d[m])
        for h, d, m in zip(hidden, durations, mask)
    ]
    frame_lengths = torch.tensor(
        [e.shape[0] for e in expanded], device=hidden.device
    )
    total = max_frames or int(frame_lengths.max())
    out = hidden.new_zeros(hidden.shape[0], total, hidden.shape[2])
    for row, frames in enumerate(expanded):
        out[row, : frames.shape[0]] = frames[:total]
    return out, frame_lengths


class UnitDecoder(nn.Module):
    """Frame states plus projected pitch and energy through self-attention
    blocks to unit logits. The output projection starts at zero."""

    def __init__(self, config: Txt2VecConfig):
        """
        Class constructor for UnitDecoder.

        Parameters
        ----------
        config : Txt2VecConfig
        """
        super().__init__()
        self.pitch_projection = nn.Linear(1, config.d_model)
        self.energy_projection = nn.Linear(1, config.d_model)
        self.stack = TransformerStack(config, config.decoder_blocks)
        self.output = nn.Linear(config.d_model, config.num_units)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def forward(
        self,
        frame_hidden: torch.Tensor,
        pitch_frames: torch.Tensor,
        energy_frames: torch.Tensor,
        frame_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        frame_hidden : torch.Tensor
          (B, T, d)
        pitch_frames : torch.Tensor
          (B, T) log F0
        energy_frames : torch.Tensor
          (B, T) log energy
        frame_mask : Optional[torch.Tensor]
          (B, T) True on valid frames

        Returns
        -------
        torch.Tensor
          (B, T, K)

        """
        if (
            pitch_frames.shape != frame_hidden.shape[:2]
            or energy_frames.shape != frame_hidden.shape[:2]
        ):
            raise ValueError(
                f"Frame streams disagree: hidden {tuple(frame_hidden.shape)}, "
                f"pitch {tuple(pitch_frames.shape)}, "
                f"energy {tuple(energy_frames.shape)}"
            )
        if frame_mask is None:
            frame_mask = torch.ones(
                frame_hidden.shape[:2],
                dtype=torch.bool,
                device=frame_hidden.device,
            )
        x = (
            frame_hidden
            + self.pitch_projection(pitch_frames[..., None])
            + self.energy_projection(energy_frames[..., None])
        )
        positions = sinusoid_positions(x.shape[1], x.shape[2], x.dtype)
        x = self.stack(x + positions[None].to(x.device), frame_mask)
        return self.output(x)


class Txt2Vec(nn.Module):
    """Stage-1 model"""

    def __init__(self, config: Txt2VecConfig):
        """
        Class constructor for Txt2Vec.

        Parameters
        ----------
        config : Txt2VecConfig
        """
        super().__init__()
        self.config = config
        self.phoneme_encoder = PhonemeEncoder(config)
        self.style_encoder = MelStyleEncoder(config)
        self.pitch_predictor = VariancePredictor(config)
        self.energy_predictor = VariancePredictor(config)
        self.duration_predictor = VariancePredictor(config)
        self.decoder = UnitDecoder(config)
        self.trained = False

    def encode_phonemes(
        self,
        phoneme_ids: torch.Tensor,
        language_ids: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(B, L) ids -> (B, L, d_model) states"""
        if mask is None:
            mask = torch.ones_like(phoneme_ids, dtype=torch.bool)
        return self.phoneme_encoder(phoneme_ids, language_ids, mask)

    def mel_style_encode(
        self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """(B, T, n_mels) -> (B, d_model) style vector M"""
        return self.style_encoder(mel, lengths)

    def predict_variances(
        self,
        hidden: torch.Tensor,
        style: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
    ) -> VarianceValues:
        """
        Per-phoneme log pitch, log energy and log duration. M is broadcast
        onto every phoneme state before prediction.
        Parameters
        ----------
        hidden : torch.Tensor
          (B, L, d)
        style : torch.Tensor
          (B, d)
        mask : Optional[torch.Tensor]
          (B, L) True on valid phonemes

        Returns
        -------
        VarianceValues

        """
        if style.shape[-1] != hidden.shape[-1]:
            raise ValueError(
                f"Style dimension {style.shape[-1]} does not match hidden "
                f"dimension {hidden.shape[-1]}"
            )
        if mask is None:
            mask = torch.ones(
                hidden.shape[:2], dtype=torch.bool, device=hidden.device
            )
        conditioned = hidden + style[:, None, :]
        return VarianceValues(
            pitch=self.pitch_predictor(conditioned, mask),
            energy=self.energy_predictor(conditioned, mask),
            duration=self.duration_predictor(conditioned, mask),
        )

    def decode_units(
        self,
        frame_hidden: torch.Tensor,
        pitch_frames: torch.Tensor,
        energy_frames: torch.Tensor,
        frame_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(B, T, d) frame states -> (B, T, K) unit logits"""
        return self.decoder(
            frame_hidden, pitch_frames, energy_frames, frame_mask
        )

    def forward(self, batch: Txt2VecBatch) -> Txt2VecOutputs:
        """
        Teacher-forced pass: ground-truth durations, pitch and energy drive
        the length regulator and the decoder.
        Parameters
        ----------
        batch : Txt2VecBatch

        Returns
        -------
        Txt2VecOutputs

        """
        hidden = self.encode_phonemes(
            batch.phoneme_ids, batch.language_ids, batch.phoneme_mask
        )
        style = self.mel_style_encode(batch.reference_mel, batch.mel_lengths)
        variances = self.predict_variances(hidden, style, batch.phoneme_mask)
        total = batch.frame_mask.shape[1]
        frame_hidden, _ = length_regulate_batch(
            hidden + style[:, None, :],
            batch.durations,
            batch.phoneme_mask,
            total,
        )
        prosody, _ = length_regulate_batch(
            torch.stack([batch.pitch, batch.energy], dim=-1),
            batch.durations,
            batch.phoneme_mask,
            total,
        )
        logits = self.decode_units(
            frame_hidden, prosody[..., 0], prosody[..., 1], batch.frame_mask
        )
        return Txt2VecOutputs(logits=logits, variances=variances, style=style)

    def infer(
        self,
        phoneme_ids: Sequence[int],
        language_id: int,
        reference_mel: np.ndarray,
        frame_hop: int = 256,
    ) -> Txt2VecPrediction:
        """
        Predicts units, durations and frame-level prosody for one utterance.
        Parameters
        ----------
        phoneme_ids : Sequence[int]
        language_id : int
        reference_mel : np.ndarray
          T x n_mels log-mel of the emotion reference
        frame_hop : int

        Returns
        -------
        Txt2VecPrediction

        """
        if not self.trained:
            raise CheckpointError("txt2vec model is not trained")
        was_training = self.training
        self.eval()
        dtype = self.decoder.output.weight.dtype
        with torch.no_grad():
            ids = torch.tensor([list(phoneme_ids)], dtype=torch.long)
            languages = torch.tensor([language_id], dtype=torch.long)
            mel = torch.as_tensor(np.asarray(reference_mel), dtype=dtype)[None]
            hidden = self.encode_phonemes(ids, languages)
            style = self.mel_style_encode(mel)
            variances = self.predict_variances(hidden, style)
            durations = torch.clamp(
                torch.round(torch.exp(variances.duration[0])), min=1
            ).long()
            mask = torch.ones_like(ids, dtype=torch.bool)
            frame_hidden, _ = length_regulate_batch(
                hidden + style[:, None, :], durations[None], mask
            )
            prosody, _ = length_regulate_batch(
                torch.stack([variances.pitch, variances.energy], dim=-1),
                durations[None],
                mask,
            )
            logits = self.decode_units(
                frame_hidden, prosody[..., 0], prosody[..., 1]
            )
        self.train(was_training)
        return Txt2VecPrediction(
            units=UnitSequence(
                units=torch.argmax(logits[0], dim=-1).numpy().astype(np.int64),
                frame_hop=frame_hop,
            ),
            pitch_frames=prosody[0, :, 0].double().numpy(),
            energy_frames=prosody[0, :, 1].double().numpy(),
            durations=durations.numpy(),
            style=style[0].double().numpy(),
        )


def txt2vec_loss(
    logits: torch.Tensor,
    target_units: torch.Tensor,
    variance_pred: VarianceValues,
    variance_targets: VarianceValues,
    frame_mask: Optional[torch.Tensor] = None,
    phoneme_mask: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """
    Unit cross-entropy plus mean squared errors of log pitch, log energy and
    log duration, all with unit weight.
    Parameters
    ----------
    logits : torch.Tensor
      (B, T, K)
    target_units : torch.Tensor
      (B, T)
    variance_pred : VarianceValues
    variance_targets : VarianceValues
    frame_mask : Optional[torch.Tensor]
    phoneme_mask : Optional[torch.Tensor]

    Returns
    -------
    Dict[str, torch.Tensor]
      total, unit_ce, pitch_mse, energy_mse, duration_mse

    """
    if frame_mask is None:
        frame_mask = torch.ones_like(target_units, dtype=torch.bool)
    if phoneme_mask is None:
        phoneme_mask = torch.ones_like(
            variance_targets.pitch, dtype=torch.bool
        )
    ce = F.cross_entropy(logits[frame_mask], target_units[frame_mask].long())
    weights = phoneme_mask.to(logits.dtype)
    count = weights.sum().clamp(min=1.0)
    components = {"unit_ce": ce}
    for name in ("pitch", "energy", "duration"):
        error = getattr(variance_pred, name) - getattr(variance_targets, name)
        components[f"{name}_mse"] = (error**2 * weights).sum() / count
    components["total"] = (
        ce
        + components["pitch_mse"]
        + components["energy_mse"]
        + components["duration_mse"]
    )
    return components


def load_txt2vec_state(
    config: Txt2VecConfig, state: Dict[str, torch.Tensor], trained: bool
) -> Txt2Vec:
    """Model from a checkpoint state dict"""
    model = Txt2Vec(config)
    model.load_state_dict(state)
    model.trained = trained
    model.eval()
    return model
