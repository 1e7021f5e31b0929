"""
Stage 2: unit sequences to waveforms. A convolutional frame decoder is
conditioned through speaker-emotion adaptive layer normalization (SEALN):
the speaker representation sets the per-channel scale and the emotion
embedding the per-channel shift. A transposed-convolution generator
upsamples frames to audio. Training combines mel L1, a multi-resolution
STFT loss and the speaker consistency loss (SCL).
"""

from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from xling_emotion_tts.audio_dsp import LogMelSpectrogram, Waveform
from xling_emotion_tts.configs import Vec2WavConfig
from xling_emotion_tts.exceptions import CheckpointError, ConfigurationError

STFT_RESOLUTIONS: Tuple[Tuple[int, int, int], ...] = (
    (512, 128, 512),
    (1024, 256, 1024),
    (256, 64, 256),
)
LEAKY_SLOPE = 0.1


def layer_norm(h: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """
    (h - mean) / (std + epsilon) over the last dimension, population std.
    Parameters
    ----------
    h : torch.Tensor
    epsilon : float

    Returns
    -------
    torch.Tensor

    """
    mean = h.mean(dim=-1, keepdim=True)
    centered = h - mean
    variance = (centered**2).mean(dim=-1, keepdim=True)
    # The tiny offset keeps the gradient finite for constant vectors
    std = torch.sqrt(variance + 1e-24)
    return centered / (std + epsilon)


class SEALN(nn.Module):
    """Layer normalization whose scale is an affine map of the speaker
    representation and whose shift is an affine map of the emotion
    embedding. Initialized to scale 1 and shift 0."""

    def __init__(
        self,
        dim: int,
        speaker_dim: int,
        emotion_dim: int,
        epsilon: float = 1e-5,
    ):
        """
        Class constructor for SEALN.

        Parameters
        ----------
        dim : int
          Feature dimension d
        speaker_dim : int
        emotion_dim : int
        epsilon : float
        """
        super().__init__()
        self.dim = dim
        self.epsilon = epsilon
        self.scale = nn.Linear(speaker_dim, dim)
        self.shift = nn.Linear(emotion_dim, dim)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(
        self,
        h: torch.Tensor,
        speaker: torch.Tensor,
        emotion: torch.Tensor,
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        h : torch.Tensor
          (d,), (B, d) or (B, T, d)
        speaker : torch.Tensor
          (speaker_dim,) or (B, speaker_dim)
        emotion : torch.Tensor
          (emotion_dim,) or (B, emotion_dim)

        Returns
        -------
        torch.Tensor
          Same shape as h

        """
        if h.shape[-1] != self.dim:
            raise ValueError(
                f"Feature dimension {h.shape[-1]} does not match SEALN "
                f"dimension {self.dim}"
            )
        if speaker.shape[-1] != self.scale.in_features:
            raise ValueError(
                f"Speaker dimension {speaker.shape[-1]} does not match "
                f"{self.scale.in_features}"
            )
        if emotion.shape[-1] != self.shift.in_features:
            raise ValueError(
                f"Emotion dimension {emotion.shape[-1]} does not match "
                f"{self.shift.in_features}"
            )
        scale = self.scale(speaker)
        shift = self.shift(emotion)
        if h.dim() == 3:
            scale = scale.reshape(-1, 1, self.dim)
            shift = shift.reshape(-1, 1, self.dim)
        return scale * layer_norm(h, self.epsilon) + shift


class SpeakerTable(nn.Module):
    """Trainable speaker lookup, or a projection of an external speaker
    embedding for voice cloning"""

    def __init__(self, config: Vec2WavConfig):
        """
        Class constructor for SpeakerTable.

        Parameters
        ----------
        config : Vec2WavConfig
        """
        super().__init__()
        self.mode = config.speaker_mode
        self.num_speakers = config.num_speakers
        self.lookup = nn.Embedding(config.num_speakers, config.speaker_dim)
        self.external = nn.Linear(
            config.external_speaker_dim, config.speaker_dim
        )

    def forward(
        self,
        speaker_ids: Optional[torch.Tensor] = None,
        external: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        speaker_ids : Optional[torch.Tensor]
          (B,) ids; used in lookup mode
        external : Optional[torch.Tensor]
          (B, external_speaker_dim); used in external mode

        Returns
        -------
        torch.Tensor
          (B, speaker_dim)

        """
        if self.mode == "external":
            if external is None:
                raise ConfigurationError(
                    "Speaker table is in external mode but no external "
                    "speaker embedding was given"
                )
            return self.external(external)
        if speaker_ids is None:
            raise ConfigurationError("A speaker id is required")
        unknown = (speaker_ids < 0) | (speaker_ids >= self.num_speakers)
        if bool(unknown.any()):
            raise ConfigurationError(
                f"Unknown speaker id(s) {speaker_ids[unknown].tolist()}; "
                f"the table holds {self.num_speakers} speakers"
            )
        return self.lookup(speaker_ids)


class ResidualConvBlock(nn.Module):
    """Two convolutions with a residual connection, channels-last in/out"""

    def __init__(self, dim: int, kernel_size: int):
        """
        Class constructor for ResidualConvBlock.

        Parameters
        ----------
        dim : int
        kernel_size : int
        """
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x (B, T, d)"""
        y = F.leaky_relu(self.conv1(x.transpose(1, 2)), LEAKY_SLOPE)
        return x + self.conv2(y).transpose(1, 2)


class FrameDecoder(nn.Module):
    """Unit embeddings plus pitch and energy projections, processed by
    residual blocks each followed by SEALN. With use_sealn off, each block
    is followed by plain layer norm and the speaker and emotion
    projections are added to the block input."""

    def __init__(self, config: Vec2WavConfig):
        """
        Class constructor for FrameDecoder.

        Parameters
        ----------
        config : Vec2WavConfig
        """
        super().__init__()
        self.config = config
        d = config.d_model
        self.unit_embedding = nn.Embedding(config.num_units, d)
        self.pitch_projection = nn.Linear(1, d)
        self.energy_projection = nn.Linear(1, d)
        self.blocks = nn.ModuleList(
            [
                ResidualConvBlock(d, config.kernel_size)
                for _ in range(config.decoder_blocks)
            ]
        )
        if config.use_sealn:
            self.norms = nn.ModuleList(
                [
                    SEALN(
                        d,
                        config.speaker_dim,
                        config.emotion_dim,
                        config.epsilon,
                    )
                    for _ in range(config.decoder_blocks)
                ]
            )
        else:
            self.norms = nn.ModuleList(
                [
                    nn.LayerNorm(d, eps=config.epsilon)
                    for _ in range(config.decoder_blocks)
                ]
            )
            self.speaker_projection = nn.Linear(config.speaker_dim, d)
            self.emotion_projection = nn.Linear(config.emotion_dim, d)

    def forward(
        self,
        units: torch.Tensor,
        speaker: torch.Tensor,
        emotion: torch.Tensor,
        pitch_frames: torch.Tensor,
        energy_frames: torch.Tensor,
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        units : torch.Tensor
          (B, T) unit ids
        speaker : torch.Tensor
          (B, speaker_dim) speaker representation S
        emotion : torch.Tensor
          (B, emotion_dim) emotion embedding E
        pitch_frames : torch.Tensor
          (B, T)
        energy_frames : torch.Tensor
          (B, T)

        Returns
        -------
        torch.Tensor
          (B, T, d)

        """
        if (
            pitch_frames.shape != units.shape
            or energy_frames.shape != units.shape
        ):
            raise ValueError(
                f"Frame streams disagree: units {tuple(units.shape)}, "
                f"pitch {tuple(pitch_frames.shape)}, "
                f"energy {tuple(energy_frames.shape)}"
            )
        if not self.config.use_emotion:
            emotion = torch.zeros_like(emotion)
        x = self.unit_embedding(units)
        x = (
            x
            + self.pitch_projection(pitch_frames[..., None].to(x.dtype))
            + self.energy_projection(energy_frames[..., None].to(x.dtype))
        )
        for block, norm in zip(self.blocks, self.norms):
            if self.config.use_sealn:
                x = norm(block(x), speaker, emotion)
            else:
                conditioning = self.speaker_projection(
                    speaker
                ) + self.emotion_projection(emotion)
                x = norm(block(x + conditioning[:, None, :]))
        return x


class Generator(nn.Module):
    """Transposed-convolution upsampler from frame features to samples;
    each stage multiplies the length by its rate exactly"""

    def __init__(self, config: Vec2WavConfig):
        """
        Class constructor for Generator.

        Parameters
        ----------
        config : Vec2WavConfig
        """
        super().__init__()
        channels = config.upsample_channels
        self.pre = nn.Conv1d(config.d_model, channels, 7, padding=3)
        self.ups = nn.ModuleList()
        self.refines = nn.ModuleList()
        for rate in config.upsample_rates:
            out_channels = max(8, channels // 2)
            self.ups.append(
                nn.ConvTranspose1d(
                    channels,
                    out_channels,
                    kernel_size=2 * rate,
                    stride=rate,
                    padding=rate // 2,
                )
            )
            self.refines.append(
                nn.Conv1d(out_channels, out_channels, 3, padding=1)
            )
            channels = out_channels
        self.post = nn.Conv1d(channels, 1, 7, padding=3)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, d) -> (B, T * hop) samples in (-1, 1)"""
        x = self.pre(frames.transpose(1, 2))
        for up, refine in zip(self.ups, self.refines):
            x = up(F.leaky_relu(x, LEAKY_SLOPE))
            x = x + refine(F.leaky_relu(x, LEAKY_SLOPE))
        x = self.post(F.leaky_relu(x, LEAKY_SLOPE))
        return torch.tanh(x).squeeze(1)


class Vec2Wav(nn.Module):
    """Stage-2 model"""

    def __init__(self, config: Vec2WavConfig):
        """
        Class constructor for Vec2Wav.

        Parameters
        ----------
        config : Vec2WavConfig
        """
        super().__init__()
        self.config = config
        self.speaker_table = SpeakerTable(config)
        self.frame_decoder = FrameDecoder(config)
        self.generator = Generator(config)
        self.trained = False

    def frame_decode(
        self,
        units: torch.Tensor,
        emotion: torch.Tensor,
        pitch_frames: torch.Tensor,
        energy_frames: torch.Tensor,
        speaker_ids: Optional[torch.Tensor] = None,
        external_speaker: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(B, T) units -> (B, T, d) frame features"""
        speaker = self.speaker_table(speaker_ids, external_speaker)
        return self.frame_decoder(
            units,
            speaker,
            emotion.to(speaker.dtype),
            pitch_frames,
            energy_frames,
        )

    def generate_waveform(self, frame_features: torch.Tensor) -> torch.Tensor:
        """(B, T, d) -> (B, T * hop)"""
        return self.generator(frame_features)

    def forward(
        self,
        units: torch.Tensor,
        emotion: torch.Tensor,
        pitch_frames: torch.Tensor,
        energy_frames: torch.Tensor,
        speaker_ids: Optional[torch.Tensor] = None,
        external_speaker: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Units and conditioning -> (B, T * hop) samples"""
        features = self.frame_decode(
            units,
            emotion,
            pitch_frames,
            energy_frames,
            speaker_ids,
            external_speaker,
        )
        return self.generate_waveform(features)

    def infer(
        self,
        units: Sequence[int],
        emotion: np.ndarray,
        pitch_frames: np.ndarray,
        energy_frames: np.ndarray,
        sample_rate: int,
        speaker_id: Optional[int] = None,
        external_speaker: Optional[np.ndarray] = None,
    ) -> Waveform:
        """
        Synthesizes one utterance.
        Parameters
        ----------
        units : Sequence[int]
        emotion : np.ndarray
          Emotion embedding E
        pitch_frames : np.ndarray
        energy_frames : np.ndarray
        sample_rate : int
        speaker_id : Optional[int]
        external_speaker : Optional[np.ndarray]
          Speaker-encoder embedding, external mode only

        Returns
        -------
        Waveform

        """
        if not self.trained:
            raise CheckpointError("vec2wav model is not trained")
        was_training = self.training
        self.eval()
        dtype = self.generator.post.weight.dtype
        with torch.no_grad():
            samples = self(
                torch.as_tensor(np.asarray(units), dtype=torch.long)[None],
                torch.as_tensor(np.asarray(emotion), dtype=dtype)[None],
                torch.as_tensor(np.asarray(pitch_frames), dtype=dtype)[None],
                torch.as_tensor(np.asarray(energy_frames), dtype=dtype)[None],
                speaker_ids=(
                    None
                    if speaker_id is None
                    else torch.tensor([speaker_id], dtype=torch.long)
                ),
                external_speaker=(
                    None
                    if external_speaker is None
                    else torch.as_tensor(
                        np.asarray(external_speaker), dtype=dtype
                    )[None]
                ),
            )[0]
        self.train(was_training)
        return Waveform(
            samples=np.clip(samples.double().numpy(), -1.0, 1.0),
            sample_rate=sample_rate,
        )


def _stft_magnitude(
    samples: torch.Tensor, n_fft: int, hop: int, win: int
) -> torch.Tensor:
    """Magnitude spectrogram (B, F, T)"""
    window = torch.hann_window(win, dtype=samples.dtype, device=samples.device)
    spec = torch.stft(
        samples,
        n_fft=n_fft,
        hop_length=hop,
        win_length=win,
        window=window,
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return torch.sqrt(spec.real**2 + spec.imag**2 + 1e-9)


def multi_resolution_stft_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    resolutions: Sequence[Tuple[int, int, int]] = STFT_RESOLUTIONS,
) -> torch.Tensor:
    """
    Mean over resolutions of spectral convergence plus log-magnitude L1.
    Parameters
    ----------
    generated : torch.Tensor
      (B, N)
    target : torch.Tensor
      (B, N)
    resolutions : Sequence[Tuple[int, int, int]]
      (n_fft, hop, win) triples

    Returns
    -------
    torch.Tensor
      Scalar

    """
    total = generated.new_zeros(())
    for n_fft, hop, win in resolutions:
        generated_mag = _stft_magnitude(generated, n_fft, hop, win)
        target_mag = _stft_magnitude(target, n_fft, hop, win)
        convergence = torch.linalg.norm(
            target_mag - generated_mag
        ) / torch.linalg.norm(target_mag)
        log_l1 = F.l1_loss(torch.log(generated_mag), torch.log(target_mag))
        total = total + convergence + log_l1
    return total / len(resolutions)


def scl_loss(
    generated: torch.Tensor,
    reference: torch.Tensor,
    embed_fn: Callable[[torch.Tensor], torch.Tensor],
    alpha: float = 1.0,
) -> torch.Tensor:
    """
    Speaker consistency loss: -alpha times the mean cosine similarity of the
    speaker embeddings of generated and reference audio. Gradients flow
    into the generated audio only.
    Parameters
    ----------
    generated : torch.Tensor
      (n, N)
    reference : torch.Tensor
      (n, N)
    embed_fn : Callable[[torch.Tensor], torch.Tensor]
      Frozen speaker encoder, audio (n, N) -> (n, D)
    alpha : float

    Returns
    -------
    torch.Tensor
      Scalar in [-alpha, alpha]

    """
    if generated.shape[0] != reference.shape[0]:
        raise ValueError(
            f"Batch sizes differ: {generated.shape[0]} generated, "
            f"{reference.shape[0]} reference"
        )
    if generated.shape[0] < 1:
        raise ValueError("scl_loss needs at least one item")
    generated_embedding = embed_fn(generated)
    with torch.no_grad():
        reference_embedding = embed_fn(reference)
    cosine = F.cosine_similarity(
        generated_embedding,
        reference_embedding.to(generated_embedding.dtype),
        dim=-1,
    )
    return -alpha * cosine.clamp(-1.0, 1.0).mean()


def vec2wav_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    mel_front_end: LogMelSpectrogram,
    embed_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    alpha: float = 1.0,
) -> Dict[str, torch.Tensor]:
    """
    Reconstruction losses plus SCL.
    Parameters
    ----------
    generated : torch.Tensor
      (B, N)
    target : torch.Tensor
      (B, N) clean ground truth
    mel_front_end : LogMelSpectrogram
    embed_fn : Optional[Callable[[torch.Tensor], torch.Tensor]]
      Frozen speaker encoder; SCL is skipped when None or alpha == 0
    alpha : float

    Returns
    -------
    Dict[str, torch.Tensor]
      total, mel_l1, stft, scl

    """
    mel_l1 = F.l1_loss(mel_front_end(generated), mel_front_end(target))
    stft = multi_resolution_stft_loss(generated, target)
    if embed_fn is None or alpha == 0:
        scl = generated.new_zeros(())
    else:
        scl = scl_loss(generated, target, embed_fn, alpha)
    return {
        "total": mel_l1 + stft + scl,
        "mel_l1": mel_l1,
        "stft": stft,
        "scl": scl,
    }


def load_vec2wav_state(
    config: Vec2WavConfig, state: Dict[str, torch.Tensor], trained: bool
) -> Vec2Wav:
    """Model from a checkpoint state dict"""
    model = Vec2Wav(config)
    model.load_state_dict(state)
    model.trained = trained
    model.eval()
    return model
