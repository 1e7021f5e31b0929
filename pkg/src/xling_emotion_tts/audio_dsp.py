"""
Waveform I/O and analysis: log-mel spectrograms, normalized-autocorrelation
pitch tracking, frame energy, all-pole envelope peaks and the formant-shift
primitive used by the speaker perturbation.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F
from scipy import signal

from xling_emotion_tts.configs import MelConfig, PitchConfig
from xling_emotion_tts.exceptions import ConfigurationError, WavFormatError

PCM16_SCALE = 32768.0
MIN_FORMANT_FACTOR = 0.5
MAX_FORMANT_FACTOR = 2.0


@dataclass(eq=False)
class Waveform:
    """Mono audio with samples in [-1, 1]"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        """Validates shape and range."""
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("Waveform samples must be a non-empty 1-D array")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("Waveform samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError("Waveform sample_rate must be positive")

    @property
    def duration(self) -> float:
        """Length in seconds"""
        return self.samples.size / self.sample_rate


@dataclass(eq=False)
class MelSpectrogram:
    """Log-magnitude mel frames, T x n_mels"""

    frames: np.ndarray
    hop: int
    n_fft: int
    n_mels: int

    @property
    def num_frames(self) -> int:
        """T"""
        return self.frames.shape[0]


@dataclass(eq=False)
class PitchTrack:
    """Per-frame F0 in Hz; 0 marks unvoiced frames"""

    f0: np.ndarray
    frame_hop: int

    @property
    def voiced(self) -> np.ndarray:
        """Boolean voicing mask"""
        return self.f0 > 0


def load_wav(path: Union[Path, str]) -> Waveform:
    """
    Reads a RIFF PCM16 mono file.
    Parameters
    ----------
    path : Union[Path, str]

    Returns
    -------
    Waveform
      Raises WavFormatError naming the offending field when the file is not
      RIFF PCM16 mono.

    """
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise WavFormatError(f"{path}: format: unreadable audio ({e})") from e
    if info.format != "WAV":
        raise WavFormatError(
            f"{path}: format: expected WAV, found {info.format}"
        )
    if info.subtype != "PCM_16":
        raise WavFormatError(
            f"{path}: subtype: expected PCM_16, found {info.subtype}"
        )
    if info.channels != 1:
        raise WavFormatError(
            f"{path}: channels: expected 1, found {info.channels}"
        )
    if info.frames == 0:
        raise WavFormatError(f"{path}: frames: file holds no samples")
    data, sample_rate = sf.read(str(path), dtype="int16")
    return Waveform(
        samples=data.astype(np.float64) / PCM16_SCALE, sample_rate=sample_rate
    )


def save_wav(waveform: Waveform, path: Union[Path, str]) -> Path:
    """
    Writes a waveform as RIFF PCM16 mono. Quantization rounds to the nearest
    step of 2**-15, clipping +1.0 to the largest positive code.
    Parameters
    ----------
    waveform : Waveform
    path : Union[Path, str]

    Returns
    -------
    Path

    """
    path = Path(path)
    codes = np.clip(
        np.round(waveform.samples * PCM16_SCALE), -PCM16_SCALE, 32767
    ).astype(np.int16)
    sf.write(
        str(path),
        codes,
        waveform.sample_rate,
        subtype="PCM_16",
        format="WAV",
    )
    return path


def frame_signal(
    samples: np.ndarray, win: int, hop: int, pad: int
) -> np.ndarray:
    """
    Slices a signal into overlapping frames after reflect padding.
    Parameters
    ----------
    samples : np.ndarray
    win : int
    hop : int
    pad : int
      Samples of reflect padding on each side

    Returns
    -------
    np.ndarray
      Array of shape (T, win) with T = 1 + floor((len + 2 pad - win) / hop)

    """
    padded = np.pad(samples, (pad, pad), mode="reflect") if pad else samples
    if padded.size < win:
        raise ValueError(
            f"Signal of {samples.size} samples is shorter than one window "
            f"of {win} samples"
        )
    return np.lib.stride_tricks.sliding_window_view(padded, win)[::hop]


class LogMelSpectrogram(torch.nn.Module):
    """Differentiable log-mel front-end shared by analysis, the reference
    encoders and the vec2wav reconstruction loss."""

    def __init__(self, mel_config: MelConfig, sample_rate: int):
        """
        Class constructor for LogMelSpectrogram.

        Parameters
        ----------
        mel_config : MelConfig
        sample_rate : int
        """
        super().__init__()
        self.mel_config = mel_config
        self.sample_rate = sample_rate
        basis = librosa.filters.mel(
            sr=sample_rate,
            n_fft=mel_config.n_fft,
            n_mels=mel_config.n_mels,
            fmin=mel_config.fmin,
            fmax=mel_config.fmax,
        )
        window = torch.hann_window(mel_config.win, dtype=torch.float64)
        offset = (mel_config.n_fft - mel_config.win) // 2
        window = F.pad(
            window, (offset, mel_config.n_fft - mel_config.win - offset)
        )
        self.register_buffer("mel_basis", torch.from_numpy(basis).double())
        self.register_buffer("window", window)

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        """
        Parameters
        ----------
        samples : torch.Tensor
          (N,) or (B, N)

        Returns
        -------
        torch.Tensor
          (T, n_mels) or (B, T, n_mels)

        """
        cfg = self.mel_config
        squeeze = samples.dim() == 1
        batch = samples.unsqueeze(0) if squeeze else samples
        if batch.shape[-1] < cfg.n_fft:
            raise ValueError(
                f"Waveform of {batch.shape[-1]} samples is shorter than one "
                f"window of {cfg.n_fft} samples"
            )
        if cfg.pad:
            batch = F.pad(
                batch.unsqueeze(1), (cfg.pad, cfg.pad), mode="reflect"
            ).squeeze(1)
        spec = torch.stft(
            batch,
            n_fft=cfg.n_fft,
            hop_length=cfg.hop,
            win_length=cfg.n_fft,
            window=self.window.to(batch.dtype),
            center=False,
            return_complex=True,
        )
        magnitude = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-12)
        mel = torch.matmul(self.mel_basis.to(batch.dtype), magnitude)
        log_mel = torch.log(torch.clamp(mel, min=cfg.log_floor))
        log_mel = log_mel.transpose(1, 2)
        return log_mel.squeeze(0) if squeeze else log_mel


_MEL_FRONT_ENDS: Dict[Tuple, LogMelSpectrogram] = {}


def get_mel_front_end(
    mel_config: MelConfig, sample_rate: int
) -> LogMelSpectrogram:
    """Returns a cached LogMelSpectrogram for the given settings."""
    key = (mel_config.model_dump_json(), sample_rate)
    if key not in _MEL_FRONT_ENDS:
        _MEL_FRONT_ENDS[key] = LogMelSpectrogram(mel_config, sample_rate)
    return _MEL_FRONT_ENDS[key]


def mel_spectrogram(
    waveform: Waveform, mel_config: Optional[MelConfig] = None
) -> MelSpectrogram:
    """
    Computes a log-magnitude mel spectrogram.
    Parameters
    ----------
    waveform : Waveform
    mel_config : Optional[MelConfig]

    Returns
    -------
    MelSpectrogram
      Raises ValueError if the waveform is shorter than one window.

    """
    cfg = mel_config or MelConfig()
    front_end = get_mel_front_end(cfg, waveform.sample_rate)
    with torch.no_grad():
        frames = front_end(torch.from_numpy(waveform.samples)).numpy()
    return MelSpectrogram(
        frames=frames, hop=cfg.hop, n_fft=cfg.n_fft, n_mels=cfg.n_mels
    )


def _normalized_autocorrelation(frames: np.ndarray, max_lag: int):
    """Normalized autocorrelation of every frame for lags 0..max_lag."""
    width = frames.shape[1]
    spectrum = np.fft.rfft(frames, n=2 * width, axis=1)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, n=2 * width, axis=1)
    acf = acf[:, : max_lag + 1]
    cumulative = np.cumsum(frames**2, axis=1)
    total = cumulative[:, -1:]
    lags = np.arange(max_lag + 1)
    head_energy = cumulative[:, width - 1 - lags]
    tail_energy = total - np.concatenate(
        [np.zeros_like(total), cumulative[:, :-1]], axis=1
    )[:, lags]
    return acf / np.sqrt(head_energy * tail_energy + 1e-20), total[:, 0]


def _local_maxima(curve: np.ndarray, low: int, high: int) -> np.ndarray:
    """Lags in [low, high] where the curve has an interior local maximum"""
    low = max(low, 1)
    high = min(high, curve.size - 2)
    if high < low:
        return np.zeros(0, dtype=int)
    lags = np.arange(low, high + 1)
    centre = curve[lags]
    mask = (centre > curve[lags - 1]) & (centre >= curve[lags + 1])
    return lags[mask]


def _refine_period(curve: np.ndarray, lag: int) -> float:
    """Parabolic interpolation of a correlation peak"""
    left, centre, right = curve[lag - 1], curve[lag], curve[lag + 1]
    denominator = left - 2.0 * centre + right
    shift = 0.5 * (left - right) / denominator if denominator < 0 else 0.0
    return lag + float(np.clip(shift, -0.5, 0.5))


def _near_max(curve: np.ndarray, position: float) -> float:
    """Largest correlation within one sample of a fractional lag"""
    centre = int(round(position))
    return float(curve[max(0, centre - 1) : centre + 2].max())


def _frame_period(
    curve: np.ndarray, min_lag: int, max_lag: int, octave_ratio: float
) -> Tuple[float, float]:
    """
    Period of one frame and its correlation. The strongest interior maximum
    is kept unless a sub-multiple of it is itself a maximum and every
    multiple of that sub-multiple reaches octave_ratio of the peak.
    """
    maxima = _local_maxima(curve, min_lag + 1, max_lag - 1)
    if maxima.size == 0:
        return 0.0, 0.0
    strongest = int(maxima[np.argmax(curve[maxima])])
    peak = float(curve[strongest])
    threshold = octave_ratio * peak
    for divisor in range(strongest // (min_lag + 1), 1, -1):
        target = strongest / divisor
        tolerance = max(1.0, 0.05 * target)
        nearby = maxima[np.abs(maxima - target) <= tolerance]
        if nearby.size == 0:
            continue
        lag = int(nearby[np.argmax(curve[nearby])])
        if curve[lag] >= threshold and all(
            _near_max(curve, multiple * target) >= threshold
            for multiple in range(2, divisor)
        ):
            return _refine_period(curve, lag), float(curve[lag])
    return _refine_period(curve, strongest), peak


def extract_pitch(
    waveform: Waveform, pitch_config: Optional[PitchConfig] = None
) -> Tuple[PitchTrack, float]:
    """
    Frame-wise F0 by normalized autocorrelation. A frame is voiced when its
    strongest interior correlation maximum reaches the voicing threshold.
    The period is that lag or a consistent sub-multiple of it. Frames more
    than octave_tolerance octaves away from the utterance median are then
    searched again near the median period, and left unvoiced when no
    maximum there reaches the voicing threshold.
    Parameters
    ----------
    waveform : Waveform
    pitch_config : Optional[PitchConfig]

    Returns
    -------
    Tuple[PitchTrack, float]
      The track and the median F0 over voiced frames (0 if none)

    """
    cfg = pitch_config or PitchConfig()
    sample_rate = waveform.sample_rate
    if sample_rate < 8000:
        raise ConfigurationError(
            f"Pitch extraction needs sample_rate >= 8000, got {sample_rate}"
        )
    frames = frame_signal(
        waveform.samples, cfg.win, cfg.hop, (cfg.win - cfg.hop) // 2
    )
    min_lag = max(2, int(np.floor(sample_rate / cfg.fmax)))
    max_lag = min(int(np.ceil(sample_rate / cfg.fmin)), cfg.win - 2)
    nacf, energy = _normalized_autocorrelation(frames, max_lag + 1)
    f0 = np.zeros(frames.shape[0])
    for index in range(frames.shape[0]):
        if energy[index] <= 1e-8 * cfg.win:
            continue
        period, strength = _frame_period(
            nacf[index], min_lag, max_lag, cfg.octave_ratio
        )
        if strength >= cfg.voicing_threshold:
            f0[index] = sample_rate / period
    voiced = f0 > 0
    if voiced.any():
        reference = float(np.median(f0[voiced]))
        deviation = np.zeros_like(f0)
        deviation[voiced] = np.abs(np.log2(f0[voiced] / reference))
        outliers = np.flatnonzero(deviation > cfg.octave_tolerance)
        if outliers.size:
            logging.debug(
                f"Correcting {outliers.size} of {int(voiced.sum())} voiced "
                f"frames towards the median {reference:.1f} Hz"
            )
        reference_lag = sample_rate / reference
        spread = 2.0**cfg.octave_tolerance
        for index in outliers:
            curve = nacf[index]
            maxima = _local_maxima(
                curve,
                max(min_lag + 1, int(np.ceil(reference_lag / spread))),
                min(max_lag - 1, int(np.floor(reference_lag * spread))),
            )
            f0[index] = 0.0
            if maxima.size:
                lag = int(maxima[np.argmax(curve[maxima])])
                if curve[lag] >= cfg.voicing_threshold:
                    f0[index] = sample_rate / _refine_period(curve, lag)
    f0 = np.where(f0 > 0, np.clip(f0, cfg.fmin, cfg.fmax), 0.0)
    voiced = f0 > 0
    median_pitch = float(np.median(f0[voiced])) if voiced.any() else 0.0
    return PitchTrack(f0=f0, frame_hop=cfg.hop), median_pitch


def frame_energy(
    waveform: Waveform, hop: int = 256, win: int = 1024
) -> np.ndarray:
    """
    Root-mean-square energy per window, on the same frame grid as the mel
    spectrogram.
    Parameters
    ----------
    waveform : Waveform
    hop : int
    win : int

    Returns
    -------
    np.ndarray

    """
    frames = frame_signal(waveform.samples, win, hop, (win - hop) // 2)
    return np.sqrt(np.mean(frames**2, axis=1))


def spectral_envelope_peak(
    waveform: Waveform,
    fmin: float,
    fmax: float,
    order: int = 12,
    frame_length: int = 1024,
    resolution: float = 1.0,
) -> float:
    """
    Frequency of the largest linear-prediction envelope peak in a band.
    Energetic frames are Hann windowed and fitted with an all-pole model;
    their log envelopes are averaged on a grid of `resolution` Hz and the
    maximum inside [fmin, fmax] is returned. The all-pole fit tracks
    resonances, not harmonics.
    Parameters
    ----------
    waveform : Waveform
    fmin : float
    fmax : float
    order : int
      Linear-prediction order
    frame_length : int
    resolution : float

    Returns
    -------
    float
      Peak frequency in Hz. Raises ValueError for a silent waveform.

    """
    samples = waveform.samples
    if samples.size < frame_length:
        samples = np.pad(samples, (0, frame_length - samples.size))
    frames = frame_signal(samples, frame_length, frame_length // 2, 0)
    energy = np.sum(frames**2, axis=1)
    if energy.max() <= 0:
        raise ValueError("Envelope peak of a silent waveform is undefined")
    frames = frames[energy >= 0.1 * energy.max()]
    coefficients = librosa.lpc(
        frames * np.hanning(frame_length), order=order, axis=-1
    )
    freqs = np.arange(fmin, fmax + 0.5 * resolution, resolution)
    log_envelope = np.zeros(freqs.size)
    for row in coefficients:
        _, response = signal.freqz(
            [1.0], row, worN=freqs, fs=waveform.sample_rate
        )
        log_envelope += np.log(np.abs(response) + 1e-12)
    return float(freqs[int(np.argmax(log_envelope))])


def _epochs(
    samples: np.ndarray, period_at, snap: bool
) -> np.ndarray:
    """Analysis epochs one local period apart, optionally snapped to the
    signal maximum near each expected position."""
    epochs = []
    position = 0.0
    if snap:
        first = int(round(period_at(0.0)))
        position = float(np.argmax(samples[: max(1, first)]))
    while position < samples.size:
        epochs.append(position)
        period = period_at(position)
        expected = position + period
        if snap:
            low = int(np.floor(expected - 0.3 * period))
            high = min(samples.size, int(np.ceil(expected + 0.3 * period)))
            if low >= samples.size or high <= low:
                break
            low = max(low, int(position) + 1)
            expected = float(low + np.argmax(samples[low:high]))
        position = expected
    return np.asarray(epochs)


def change_formant(
    waveform: Waveform,
    factor: float,
    median_pitch: float,
    pitch_track: Optional[PitchTrack] = None,
    pitch_config: Optional[PitchConfig] = None,
) -> Waveform:
    """
    Scales the spectral envelope by `factor` while keeping duration and
    pitch. The signal is resampled by 1/factor, then pitch-synchronous
    grains of the resampled signal are overlap-added at the analysis epochs
    of the original. Local periods come from the pitch track, with
    median_pitch anchoring unvoiced frames. With no voiced frame
    (median_pitch == 0) a fixed 10 ms grain spacing is used, so only the
    envelope scaling applies.
    Parameters
    ----------
    waveform : Waveform
    factor : float
      Envelope scale in [1/2, 2]
    median_pitch : float
      Median F0 in Hz of the input, 0 when unvoiced
    pitch_track : Optional[PitchTrack]
      Precomputed track of the input; extracted when omitted
    pitch_config : Optional[PitchConfig]

    Returns
    -------
    Waveform
      Same sample count and sample rate as the input

    """
    if not MIN_FORMANT_FACTOR <= factor <= MAX_FORMANT_FACTOR:
        raise ConfigurationError(
            f"Formant factor {factor} outside "
            f"[{MIN_FORMANT_FACTOR}, {MAX_FORMANT_FACTOR}]"
        )
    if median_pitch < 0:
        raise ConfigurationError(
            f"median_pitch must be >= 0, got {median_pitch}"
        )
    samples = waveform.samples
    sample_rate = waveform.sample_rate
    if factor == 1.0:
        return Waveform(samples=samples.copy(), sample_rate=sample_rate)
    length = samples.size
    resampled_length = max(2, int(round(length / factor)))
    resampled = signal.resample(samples, resampled_length)
    if median_pitch > 0:
        if pitch_track is None:
            pitch_track, _ = extract_pitch(waveform, pitch_config)
        centres = (
            np.arange(pitch_track.f0.size) + 0.5
        ) * pitch_track.frame_hop
        f0 = np.where(pitch_track.voiced, pitch_track.f0, median_pitch)

        def period_at(t: float) -> float:
            """Local period in samples"""
            return sample_rate / float(np.interp(t, centres, f0))

    else:
        logging.debug("No voiced frame; applying envelope scaling only")

        def period_at(t: float) -> float:
            """Fixed 10 ms spacing"""
            return 0.01 * sample_rate

    output = np.zeros(length)
    weight = np.zeros(length)
    source_axis = np.arange(resampled_length)
    for epoch in _epochs(samples, period_at, snap=median_pitch > 0):
        half = max(1, int(round(period_at(epoch) / factor)))
        offsets = np.arange(-half, half + 1)
        centre = int(round(epoch))
        positions = centre + offsets
        valid = (positions >= 0) & (positions < length)
        grain = np.interp(
            centre / factor + offsets,
            source_axis,
            resampled,
            left=0.0,
            right=0.0,
        )
        window = np.hanning(2 * half + 1)
        np.add.at(output, positions[valid], (grain * window)[valid])
        np.add.at(weight, positions[valid], window[valid])
    output /= np.maximum(weight, 1.0)
    source_rms = np.sqrt(np.mean(samples**2))
    output_rms = np.sqrt(np.mean(output**2))
    if output_rms > 0:
        output *= source_rms / output_rms
    peak = np.max(np.abs(output))
    if peak > 1.0:
        output /= peak
    return Waveform(samples=output, sample_rate=sample_rate)
