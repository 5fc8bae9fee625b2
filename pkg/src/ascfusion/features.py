"""Frame-level descriptor pool and segment aggregation for the GBM branch.

Every frame yields 205 values grouped in fixed blocks (see ``FEATURE_BLOCKS``).
Frames share the CNN framing (1764-sample Hamming windows, 882 hop).  Each of
the 7 segments of a recording is summarized by mean, variance, and mean and
variance of the first difference, giving 820 values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import SAMPLE_RATE
from .dataset import Recording
from .errors import DataError
from .frontend import (
    HOP_LENGTH,
    N_FFT,
    WIN_LENGTH,
    FrontendConfig,
    StandardizationScaler,
    frame_signal,
    hz_to_mel,
    mel_to_hz,
    normalize_waveform,
    stft_power,
    triangular_filterbank,
)

FEATURE_BLOCKS = (
    ("bark_bands", 32),
    ("erb_bands", 23),
    ("mel_bands", 45),
    ("mfcc", 13),
    ("hpcp", 38),
    ("tonal", 3),
    ("pitch", 3),
    ("silence_rate", 3),
    ("spectral", 32),
    ("gfcc", 13),
)
FRAME_DIM = sum(d for _, d in FEATURE_BLOCKS)
SEGMENT_DIM = 4 * FRAME_DIM
AGGREGATES = ("mean", "var", "dmean", "dvar")

SPECTRAL_NAMES = (
    "centroid", "spread", "skewness", "kurtosis", "flatness", "crest", "decrease",
    "rolloff85", "rolloff95", "flux", "entropy", "energy", "rms", "zcr", "hfc",
    "strong_peak",
    *(f"contrast{i}" for i in range(6)),
    *(f"valley{i}" for i in range(6)),
    "ratio_low", "ratio_midlow", "ratio_midhigh", "ratio_high",
)
SILENCE_THRESHOLDS_DB = (-20.0, -30.0, -60.0)
CONTRAST_EDGES_HZ = (0.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, SAMPLE_RATE / 2 + 1)
RATIO_EDGES_HZ = (20.0, 150.0, 800.0, 4000.0, 20000.0)
HPCP_SIZE = 36
HPCP_RANGE_HZ = (40.0, 5000.0)
PITCH_RANGE_HZ = (60.0, 2000.0)
EPS = 1e-10


def block_slices() -> dict[str, slice]:
    out, start = {}, 0
    for name, dim in FEATURE_BLOCKS:
        out[name] = slice(start, start + dim)
        start += dim
    return out


def feature_names() -> list[str]:
    names = []
    for block, dim in FEATURE_BLOCKS:
        if block == "spectral":
            names += [f"spectral.{n}" for n in SPECTRAL_NAMES]
        else:
            names += [f"{block}.{i}" for i in range(dim)]
    return [f"{agg}:{n}" for agg in AGGREGATES for n in names]


# ---------------------------------------------------------------------------
# auditory band matrices (unit-sum rows, so a flat spectrum maps to flat bands)


def _fft_freqs(n_fft=N_FFT, sr=SAMPLE_RATE):
    return np.arange(n_fft // 2 + 1) * sr / n_fft


def hz_to_bark(f):
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def _unit_sum(weights):
    return weights / weights.sum(axis=1, keepdims=True)


def bark_matrix(n_bands=32, n_fft=N_FFT, sr=SAMPLE_RATE):
    freqs = _fft_freqs(n_fft, sr)
    z = hz_to_bark(freqs)
    edges = np.linspace(0.0, z[-1] + 1e-9, n_bands + 1)
    band = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, n_bands - 1)
    weights = np.zeros((n_bands, len(freqs)))
    weights[band, np.arange(len(freqs))] = 1.0
    empty = weights.sum(axis=1) == 0
    if np.any(empty):
        # bands narrower than a bin borrow the nearest bin
        centers = 0.5 * (edges[:-1] + edges[1:])
        for b in np.flatnonzero(empty):
            weights[b, np.argmin(np.abs(z - centers[b]))] = 1.0
    return _unit_sum(weights)


def erb_matrix(n_bands=23, f_lo=50.0, f_hi=20000.0, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Squared triangles on the ERB-rate axis, a cheap gammatone stand-in."""
    e = hz_to_erb_rate(_fft_freqs(n_fft, sr))
    centers = np.linspace(hz_to_erb_rate(f_lo), hz_to_erb_rate(f_hi), n_bands)
    width = centers[1] - centers[0]
    weights = np.maximum(0.0, 1.0 - np.abs(e[None, :] - centers[:, None]) / width) ** 2
    return _unit_sum(weights)


def mel_matrix(n_bands=45, n_fft=N_FFT, sr=SAMPLE_RATE):
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2), n_bands + 2))
    return _unit_sum(triangular_filterbank(edges, n_fft, sr))


def hpcp_matrix(size=HPCP_SIZE, n_fft=N_FFT, sr=SAMPLE_RATE, window_semitones=4 / 3):
    """Bin-to-pitch-class weights with a cos^2 window; reference A = 440 Hz."""
    freqs = _fft_freqs(n_fft, sr)
    valid = (freqs >= HPCP_RANGE_HZ[0]) & (freqs <= HPCP_RANGE_HZ[1])
    pos = np.zeros_like(freqs)
    pos[valid] = (size * np.log2(freqs[valid] / 440.0)) % size
    width = window_semitones * size / 12.0
    dist = np.abs(pos[:, None] - np.arange(size)[None, :])
    dist = np.minimum(dist, size - dist)
    weights = np.where(dist < width / 2, np.cos(np.pi * dist / width) ** 2, 0.0)
    weights[~valid] = 0.0
    return weights


@dataclass
class _Banks:
    bark: np.ndarray
    erb: np.ndarray
    mel: np.ndarray
    hpcp: np.ndarray
    freqs: np.ndarray


_BANKS: _Banks | None = None


def _banks() -> _Banks:
    global _BANKS
    if _BANKS is None:
        _BANKS = _Banks(bark_matrix(), erb_matrix(), mel_matrix(), hpcp_matrix(), _fft_freqs())
    return _BANKS


# ---------------------------------------------------------------------------
# per-block extractors; every function maps n frames to an (n, dim) array


def _db(x):
    return 10.0 * np.log10(np.maximum(x, EPS))


def _local_peaks(mag):
    peaks = np.zeros_like(mag, dtype=bool)
    peaks[:, 1:-1] = (mag[:, 1:-1] > mag[:, :-2]) & (mag[:, 1:-1] >= mag[:, 2:])
    return peaks


def hpcp_block(power, banks):
    mag = np.sqrt(power)
    peaks = _local_peaks(mag)
    profile = (np.where(peaks, power, 0.0)) @ banks.hpcp
    top = profile.max(axis=1, keepdims=True)
    profile = np.divide(profile, top, out=np.zeros_like(profile), where=top > 0)
    mean = profile.mean(axis=1)
    crest = np.divide(profile.max(axis=1), mean, out=np.zeros_like(mean), where=mean > 0)
    total = profile.sum(axis=1, keepdims=True)
    p = np.divide(profile, total, out=np.zeros_like(profile), where=total > 0)
    entropy = -np.sum(np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    return np.column_stack([profile, crest, entropy])


def pitch_block(frames, sr=SAMPLE_RATE):
    """Autocorrelation pitch: (f0 Hz, YIN-style confidence, salience)."""
    n = frames.shape[1]
    x = frames - frames.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(x, n=2 * n, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, axis=1)[:, :n]
    r0 = acf[:, 0]
    lo = int(sr / PITCH_RANGE_HZ[1])
    hi = int(sr / PITCH_RANGE_HZ[0])
    voiced = r0 > EPS
    safe_r0 = np.where(voiced, r0, 1.0)
    norm = acf[:, lo:hi + 1] / safe_r0[:, None]
    best = np.argmax(norm, axis=1)
    salience = np.clip(norm[np.arange(len(best)), best], 0.0, 1.0)
    # parabolic refinement of the lag
    left = norm[np.arange(len(best)), np.maximum(best - 1, 0)]
    mid = norm[np.arange(len(best)), best]
    right = norm[np.arange(len(best)), np.minimum(best + 1, norm.shape[1] - 1)]
    denom = left - 2 * mid + right
    shift = np.divide(0.5 * (left - right), denom, out=np.zeros_like(denom), where=np.abs(denom) > EPS)
    lag = lo + best + np.clip(shift, -0.5, 0.5)
    f0 = sr / lag
    # cumulative-mean-normalized difference d(t) = 2 (1 - r(t)/r0)
    d = 2.0 * (1.0 - acf[:, 1:hi + 1] / safe_r0[:, None])
    cum = np.cumsum(d, axis=1) / np.arange(1, hi + 1)
    dprime = np.divide(d, cum, out=np.ones_like(d), where=cum > EPS)
    confidence = np.clip(1.0 - dprime[:, lo - 1:].min(axis=1), 0.0, 1.0)
    out = np.column_stack([f0, confidence, salience])
    out[~voiced] = 0.0
    return out


def tonal_block(power, f0, banks):
    """(tuning deviation in cents, peak-energy ratio, inharmonicity)."""
    mag = np.sqrt(power)
    freqs = banks.freqs
    in_range = (freqs >= HPCP_RANGE_HZ[0]) & (freqs <= HPCP_RANGE_HZ[1])
    peaks = _local_peaks(mag) & in_range[None, :]
    peak_power = np.where(peaks, power, 0.0)
    band_power = (power * in_range[None, :]).sum(axis=1)
    ratio = np.divide(peak_power.sum(axis=1), band_power, out=np.zeros(len(power)), where=band_power > EPS)

    rows = np.arange(len(power))
    k = np.argmax(peak_power, axis=1)
    has_peak = peak_power[rows, k] > 0
    km = np.clip(k, 1, len(freqs) - 2)
    a, b, c = (np.log(np.maximum(mag[rows, km + o], EPS)) for o in (-1, 0, 1))
    denom = a - 2 * b + c
    shift = np.divide(0.5 * (a - c), denom, out=np.zeros_like(denom), where=np.abs(denom) > EPS)
    f_peak = (km + np.clip(shift, -0.5, 0.5)) * freqs[1]
    semis = 12.0 * np.log2(np.maximum(f_peak, EPS) / 440.0)
    tuning = np.where(has_peak, 100.0 * (semis - np.round(semis)), 0.0)

    # inharmonicity over the 10 strongest peaks relative to the pitch estimate
    order = np.argsort(-peak_power, axis=1, kind="stable")[:, :10]
    pf = freqs[order]
    pa = np.take_along_axis(peak_power, order, axis=1)
    safe_f0 = np.where(f0 > 0, f0, 1.0)[:, None]
    harm = np.maximum(np.round(pf / safe_f0), 1.0)
    dev = np.abs(pf - harm * safe_f0) * pa
    norm = pa.sum(axis=1) * safe_f0[:, 0]
    inharm = np.divide(dev.sum(axis=1), norm, out=np.zeros(len(power)), where=(norm > EPS) & (f0 > 0))
    return np.column_stack([tuning, ratio, inharm])


def silence_block(frames):
    power_db = _db(np.mean(frames**2, axis=1))
    return np.column_stack([(power_db < t).astype(np.float64) for t in SILENCE_THRESHOLDS_DB])


def spectral_block(frames, power, banks):
    freqs = banks.freqs
    n = len(power)
    mag = np.sqrt(power)
    msum = mag.sum(axis=1)
    live = msum > EPS
    safe_msum = np.where(live, msum, 1.0)
    p = mag / safe_msum[:, None]
    centroid = p @ freqs
    dev = freqs[None, :] - centroid[:, None]
    spread = np.sum(p * dev**2, axis=1)
    sd = np.sqrt(spread)
    safe_sd = np.where(sd > EPS, sd, 1.0)
    skew = np.where(sd > EPS, np.sum(p * dev**3, axis=1) / safe_sd**3, 0.0)
    kurt = np.where(sd > EPS, np.sum(p * dev**4, axis=1) / safe_sd**4 - 3.0, 0.0)

    fp = np.maximum(power, EPS)
    flatness = np.exp(np.mean(np.log(fp), axis=1)) / np.mean(fp, axis=1)
    mmean = mag.mean(axis=1)
    crest = np.divide(mag.max(axis=1), mmean, out=np.zeros(n), where=mmean > EPS)
    kk = np.arange(1, mag.shape[1])
    tail = mag[:, 1:].sum(axis=1)
    decrease = np.divide(
        np.sum((mag[:, 1:] - mag[:, :1]) / kk, axis=1), tail, out=np.zeros(n), where=tail > EPS
    )
    cum = np.cumsum(power, axis=1)
    total = cum[:, -1]
    roll85 = freqs[np.minimum(np.argmax(cum >= 0.85 * total[:, None], axis=1), len(freqs) - 1)]
    roll95 = freqs[np.minimum(np.argmax(cum >= 0.95 * total[:, None], axis=1), len(freqs) - 1)]
    roll85 = np.where(total > EPS, roll85, 0.0)
    roll95 = np.where(total > EPS, roll95, 0.0)
    norm_mag = mag / np.where(live, np.linalg.norm(mag, axis=1), 1.0)[:, None]
    flux = np.zeros(n)
    flux[1:] = np.linalg.norm(np.diff(norm_mag, axis=0), axis=1)
    ptot = np.where(total > EPS, total, 1.0)
    q = power / ptot[:, None]
    entropy = -np.sum(np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0)), 0.0), axis=1)
    energy = total
    rms = np.sqrt(np.mean(frames**2, axis=1))
    signs = np.signbit(frames)
    zcr = np.mean(signs[:, 1:] != signs[:, :-1], axis=1)
    hfc = power @ np.arange(power.shape[1], dtype=np.float64)

    # strong peak: max magnitude over the width (bins) of its half-height region
    am = np.argmax(mag, axis=1)
    mmax = mag[np.arange(n), am]
    below = mag < 0.5 * mmax[:, None]
    idx = np.arange(mag.shape[1])[None, :]
    left = np.where(below & (idx < am[:, None]), idx, -1).max(axis=1)
    right = np.where(below & (idx > am[:, None]), idx, mag.shape[1]).min(axis=1)
    strong_peak = np.where(mmax > EPS, mmax / (right - left - 1), 0.0)

    contrast, valleys = [], []
    for lo, hi in zip(CONTRAST_EDGES_HZ[:-1], CONTRAST_EDGES_HZ[1:]):
        band = np.sort(power[:, (freqs >= lo) & (freqs < hi)], axis=1)
        m = max(1, int(round(0.2 * band.shape[1])))
        valley = np.log(np.mean(band[:, :m], axis=1) + EPS)
        peak = np.log(np.mean(band[:, -m:], axis=1) + EPS)
        contrast.append(peak - valley)
        valleys.append(valley)

    ratios = []
    for lo, hi in zip(RATIO_EDGES_HZ[:-1], RATIO_EDGES_HZ[1:]):
        e = power[:, (freqs >= lo) & (freqs < hi)].sum(axis=1)
        ratios.append(np.divide(e, total, out=np.zeros(n), where=total > EPS))

    out = np.column_stack(
        [centroid, spread, skew, kurt, flatness, crest, decrease, roll85, roll95, flux,
         entropy, energy, rms, zcr, hfc, strong_peak, *contrast, *valleys, *ratios]
    )
    return out


def extract_frame_features(frames: np.ndarray, power: np.ndarray) -> np.ndarray:
    """Descriptor pool for a run of consecutive frames.

    ``frames`` is (n, 1764) raw waveform, ``power`` the matching (n, 1025)
    power spectra.  Spectral flux of the first frame is 0.  Returns (n, 205).
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    power = np.atleast_2d(np.asarray(power, dtype=np.float64))
    if frames.shape[0] != power.shape[0]:
        raise DataError("frame and spectrum counts differ")
    banks = _banks()
    bark = power @ banks.bark.T
    erb = power @ banks.erb.T
    mel = power @ banks.mel.T
    mel_db, erb_db = _db(mel), _db(erb)
    mfcc = dct(mel_db, type=2, norm="ortho", axis=1)[:, :13]
    gfcc = dct(erb_db, type=2, norm="ortho", axis=1)[:, :13]
    pitch = pitch_block(frames)
    blocks = {
        "bark_bands": _db(bark),
        "erb_bands": erb_db,
        "mel_bands": mel_db,
        "mfcc": mfcc,
        "hpcp": hpcp_block(power, banks),
        "tonal": tonal_block(power, pitch[:, 0], banks),
        "pitch": pitch,
        "silence_rate": silence_block(frames),
        "spectral": spectral_block(frames, power, banks),
        "gfcc": gfcc,
    }
    out = np.concatenate([blocks[name] for name, _ in FEATURE_BLOCKS], axis=1)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite frame feature")
    return out


def band_energies(power: np.ndarray) -> dict[str, np.ndarray]:
    """Linear-scale bark/erb/mel energies (before log compression)."""
    banks = _banks()
    power = np.atleast_2d(power)
    return {"bark_bands": power @ banks.bark.T, "erb_bands": power @ banks.erb.T,
            "mel_bands": power @ banks.mel.T}


# ---------------------------------------------------------------------------
# segments


def segment_boundaries(duration_s: float = 10.0) -> list[tuple[float, float]]:
    """Six 1.5 s spans followed by a final 1 s span."""
    if duration_s < 10.0:
        raise DataError(f"recording of {duration_s:.2f} s is shorter than 10 s")
    spans = [(1.5 * i, 1.5 * (i + 1)) for i in range(6)]
    spans.append((9.0, 10.0))
    return spans


def segment_frame_ranges(n_frames: int, duration_s: float = 10.0, hop=HOP_LENGTH, sr=SAMPLE_RATE):
    """Frame index ranges per segment; a frame belongs to the span holding its start."""
    starts = np.arange(n_frames) * hop
    ranges = []
    for a, b in segment_boundaries(duration_s):
        lo = int(np.searchsorted(starts, round(a * sr), side="left"))
        hi = int(np.searchsorted(starts, round(b * sr), side="left"))
        ranges.append((lo, hi))
    return ranges


def aggregate_segment(frames: np.ndarray) -> np.ndarray:
    """[mean | variance | mean of diff | variance of diff], population variance."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise DataError("need at least 2 frames to aggregate a segment")
    diff = np.diff(frames, axis=0)
    return np.concatenate([frames.mean(0), frames.var(0), diff.mean(0), diff.var(0)])


class SegmentFeatureExtractor:
    """Recording -> (7, 820) segment feature matrix."""

    def __init__(self, waveform_norm: str = "none"):
        self.waveform_norm = waveform_norm
        self.cfg = FrontendConfig()

    def frame_features(self, recording: Recording) -> np.ndarray:
        recording = normalize_waveform(recording, self.waveform_norm)
        frames = frame_signal(recording.samples, WIN_LENGTH, HOP_LENGTH)
        return extract_frame_features(frames, stft_power(recording, self.cfg))

    def __call__(self, recording: Recording) -> np.ndarray:
        feats = self.frame_features(recording)
        ranges = segment_frame_ranges(len(feats), recording.duration)
        return np.stack([aggregate_segment(feats[lo:hi]) for lo, hi in ranges])


class FeatureScaler(StandardizationScaler):
    """Per-dimension standardization over training segment vectors."""

    def fit(self, rows):
        return super().fit([np.atleast_2d(r) for r in rows])


def fit_feature_scaler(train_segments) -> FeatureScaler:
    return FeatureScaler().fit(train_segments)


def apply_feature_scaler(scaler: FeatureScaler, x):
    return scaler.transform(x)
