"""Log-mel front end for the CNN branch.

Framing is fixed at 40 ms Hamming windows with a 20 ms hop at 44.1 kHz
(1764 / 882 samples), zero-padded to a 2048-point FFT, without centering.
A 10 s recording therefore yields 499 frames, cut into 7 patches of 75.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import SAMPLE_RATE
from .dataset import Recording
from .errors import ConfigError, DataError, NotFittedError

log = logging.getLogger(__name__)

WIN_LENGTH = 1764
HOP_LENGTH = 882
N_FFT = 2048
N_MELS = 128
PATCH_FRAMES = 75
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FrontendConfig:
    n_fft: int = N_FFT
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    f_lo: float = 0.0
    f_hi: float = SAMPLE_RATE / 2
    center: bool = False
    log_floor: float = LOG_FLOOR
    std_floor: float = STD_FLOOR
    scaler_scope: str = "per_band"
    waveform_norm: str = "none"  # none | peak | rms


def hamming(n: int) -> np.ndarray:
    """Periodic Hamming window."""
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, win_length=WIN_LENGTH, hop_length=HOP_LENGTH) -> np.ndarray:
    """Frames as a read-only view, shape (n_frames, win_length)."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < win_length:
        raise DataError(f"waveform of {len(samples)} samples is shorter than one window")
    return sliding_window_view(samples, win_length)[::hop_length]


def stft_power(recording, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Squared-magnitude STFT, shape (frames, n_fft // 2 + 1)."""
    samples = recording.samples if isinstance(recording, Recording) else np.asarray(recording)
    if cfg.center:
        pad = cfg.win_length // 2
        samples = np.pad(samples, pad, mode="reflect")
    frames = frame_signal(samples, cfg.win_length, cfg.hop_length)
    spec = np.fft.rfft(frames * hamming(cfg.win_length), n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


# ---------------------------------------------------------------------------
# mel scale (Slaney): linear below 1 kHz, logarithmic above

# the linear part is written as f * 3 / 200 (not f / (200 / 3)) so that
# 1000 Hz maps to exactly 15 mel in floating point
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ * 3.0 / 200.0
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freqs):
    freqs = np.asarray(freqs, dtype=np.float64)
    linear = freqs * 3.0 / 200.0
    with np.errstate(divide="ignore"):
        logpart = _MIN_LOG_MEL + np.log(np.maximum(freqs, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(freqs >= _MIN_LOG_HZ, logpart, linear)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    linear = mels * 200.0 / 3.0
    logpart = _MIN_LOG_HZ * np.exp(_LOGSTEP * (mels - _MIN_LOG_MEL))
    return np.where(mels >= _MIN_LOG_MEL, logpart, linear)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    center_hz: np.ndarray

    def apply(self, power: np.ndarray) -> np.ndarray:
        if power.shape[-1] != self.weights.shape[1]:
            raise DataError(
                f"power spectrum has {power.shape[-1]} bins, filterbank expects {self.weights.shape[1]}"
            )
        return power @ self.weights.T


def triangular_filterbank(edges_hz: np.ndarray, n_fft: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangles spanning consecutive edge triples, each scaled to a peak of 1."""
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(up, down))
    peaks = weights.max(axis=1)
    if np.any(peaks <= 0):
        bad = int(np.argmin(peaks))
        raise ConfigError(f"n_fft={n_fft} cannot resolve filter {bad} ({edges_hz[bad + 1]:.1f} Hz)")
    return weights / peaks[:, None]


def build_mel_filterbank(n_mels=N_MELS, f_lo=0.0, f_hi=SAMPLE_RATE / 2, n_fft=N_FFT, sr=SAMPLE_RATE):
    if f_hi > sr / 2:
        raise ConfigError(f"f_hi={f_hi} above Nyquist")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    return MelFilterbank(triangular_filterbank(edges, n_fft, sr), edges[1:-1])


def log_mel(power: np.ndarray, filterbank: MelFilterbank, floor=LOG_FLOOR) -> np.ndarray:
    return np.log(np.maximum(filterbank.apply(power), floor))


# ---------------------------------------------------------------------------
# standardization


@dataclass
class StandardizationScaler:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    scope: str = "per_band"
    std_floor: float = STD_FLOOR

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, rows) -> "StandardizationScaler":
        if self.scope not in ("per_band", "global"):
            raise ConfigError(f"unknown scaler scope {self.scope!r}")
        # fixed concatenation order keeps the reduction deterministic
        data = np.concatenate([np.asarray(r, dtype=np.float64) for r in rows], axis=0)
        if self.scope == "per_band":
            self.mean = data.mean(axis=0)
            self.std = np.maximum(data.std(axis=0), self.std_floor)
        else:
            self.mean = np.full(data.shape[1], data.mean())
            self.std = np.full(data.shape[1], max(data.std(), self.std_floor))
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("scaler used before fit")
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_scaler(train_logmels, scope="per_band", std_floor=STD_FLOOR) -> StandardizationScaler:
    return StandardizationScaler(scope=scope, std_floor=std_floor).fit(train_logmels)


def apply_scaler(scaler: StandardizationScaler, logmel: np.ndarray) -> np.ndarray:
    return scaler.transform(logmel)


# ---------------------------------------------------------------------------
# segmentation and waveform normalization


def segment_patches(logmel: np.ndarray, n_patches=7, patch_frames=PATCH_FRAMES) -> np.ndarray:
    """Cut into non-overlapping patches, shape (n_patches, patch_frames, bands).

    Missing frames of the last patch repeat the final original frame; frames
    beyond ``n_patches * patch_frames`` are dropped.
    """
    n = logmel.shape[0]
    if n < patch_frames:
        raise DataError(f"{n} frames is shorter than one {patch_frames}-frame patch")
    total = n_patches * patch_frames
    if n < total - patch_frames + 1:
        log.warning("only %d frames; %d patches will be mostly padding", n, n_patches)
    if n >= total:
        frames = logmel[:total]
    else:
        frames = np.concatenate([logmel, np.repeat(logmel[-1:], total - n, axis=0)])
    return frames.reshape(n_patches, patch_frames, logmel.shape[1])


def normalize_waveform(recording: Recording, method="peak", target_rms=0.1) -> Recording:
    """Peak (default) or RMS normalization in the time domain."""
    x = recording.samples
    if method == "none":
        return recording
    if method == "peak":
        scale = np.max(np.abs(x))
    elif method == "rms":
        scale = np.sqrt(np.mean(np.square(x))) / target_rms
    else:
        raise ConfigError(f"unknown waveform normalization {method!r}")
    if scale == 0:
        warnings.warn(f"{recording.id}: silent waveform left unnormalized", stacklevel=2)
        return recording
    return replace(recording, samples=x / scale)


class LogMelExtractor:
    """Recording -> unstandardized log-mel spectrogram (frames, n_mels)."""

    def __init__(self, cfg: FrontendConfig = FrontendConfig()):
        self.cfg = cfg
        self.filterbank = build_mel_filterbank(cfg.n_mels, cfg.f_lo, cfg.f_hi, cfg.n_fft)

    def __call__(self, recording: Recording) -> np.ndarray:
        recording = normalize_waveform(recording, self.cfg.waveform_norm)
        return log_mel(stft_power(recording, self.cfg), self.filterbank, self.cfg.log_floor)
