"""Hand-crafted audio features used as distillation targets and as metrics.

Four families:

* ``mel192avg`` -- 192-bin log-mel averaged over time; the default target.
  Its dimension (192) is independent of the audio length.
* ``mel128``    -- 128-bin log-mel over a wider STFT (window 2048, hop 1024).
* ``mfcc40``    -- 40 type-II DCT coefficients of a 256-bin log-mel, same STFT.
* ``mstft``     -- concatenated log-magnitude spectrograms over a descending
  window set {4096 .. 64} with half-window hops.

All STFTs use a periodic Hann window and centered frames over reflect padding;
frame count is ``1 + floor(len / hop)``.  Mel filters are triangular on the
HTK mel scale and area-normalized.  Log compression is natural log with a
1e-5 floor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from synthproxy.synths import AudioBuffer

LOG_FLOOR = 1.0e-5

FAMILIES = ("mel192avg", "mel128", "mfcc40", "mstft")
REDUCTIONS = ("nop", "avg_time")

MSTFT_WINDOWS: tuple[tuple[int, int], ...] = (
    (4096, 2048),
    (2048, 1024),
    (1024, 512),
    (512, 256),
    (256, 128),
    (128, 64),
    (64, 32),
)


class FeatureMismatchError(ValueError):
    """Embeddings come from different feature configurations."""


@dataclass(frozen=True)
class FeatureConfig:
    """Fully pins a feature family so its hash identifies the extractor."""

    family: str
    reduction: str = "avg_time"
    sample_rate: int = 16000
    stft_window: int = 1024
    stft_hop: int = 256
    n_mels: int = 192
    n_mfcc: int = 40
    window_set: tuple[tuple[int, int], ...] = MSTFT_WINDOWS

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown feature family {self.family!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.family == "mel192avg" and (self.reduction != "avg_time" or self.n_mels != 192):
            raise ValueError("mel192avg pins reduction=avg_time and n_mels=192")
        if self.stft_hop > self.stft_window:
            raise ValueError("hop cannot exceed window")
        if self.family == "mfcc40" and self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc cannot exceed n_mels")
        object.__setattr__(self, "window_set", tuple(tuple(w) for w in self.window_set))
        for w, h in self.window_set:
            if h > w:
                raise ValueError("window_set hop cannot exceed window")

    @classmethod
    def default(cls, family: str, reduction: str = "avg_time", sample_rate: int = 16000) -> "FeatureConfig":
        if family == "mel192avg":
            return cls("mel192avg", "avg_time", sample_rate, 1024, 256, 192)
        if family == "mel128":
            return cls("mel128", reduction, sample_rate, 2048, 1024, 128)
        if family == "mfcc40":
            return cls("mfcc40", reduction, sample_rate, 2048, 1024, 256, 40)
        if family == "mstft":
            return cls("mstft", reduction, sample_rate)
        raise ValueError(f"unknown feature family {family!r}")

    def to_json_dict(self) -> dict:
        return {
            "family": self.family,
            "reduction": self.reduction,
            "sample_rate": self.sample_rate,
            "stft_window": self.stft_window,
            "stft_hop": self.stft_hop,
            "n_mels": self.n_mels,
            "n_mfcc": self.n_mfcc,
            "window_set": [list(w) for w in self.window_set],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FeatureConfig":
        obj = dict(obj)
        obj["window_set"] = tuple(tuple(w) for w in obj.get("window_set", MSTFT_WINDOWS))
        return cls(**obj)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Embedding:
    """Feature vector plus the hash of the configuration that produced it."""

    values: np.ndarray
    config_hash: str

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 1:
            raise ValueError("embedding must be a flat vector")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _hann_periodic(n: int) -> np.ndarray:
    # periodic variant: peaks at exactly 1.0 for even n, unlike np.hanning
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft_mag(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Magnitude STFT, shape (frames, window // 2 + 1).

    Frame t is centered at sample t * hop via reflect padding of window / 2 on
    both sides.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft_mag expects mono samples")
    half = window // 2
    pad = np.pad(x, (half, half), mode="reflect") if x.size > 1 else np.zeros(window + x.size)
    n_frames = frame_count(x.size, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = pad[idx] * _hann_periodic(window)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


@lru_cache(maxsize=32)
def _mel_filterbank_cached(sample_rate: int, n_fft_bins: int, n_mels: int) -> np.ndarray:
    return _mel_filterbank(sample_rate, n_fft_bins, n_mels)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(sample_rate: int, n_mels: int) -> np.ndarray:
    """Centers of the triangular filters, evenly spaced on the HTK mel scale."""
    pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def _mel_filterbank(sample_rate: int, n_fft_bins: int, n_mels: int) -> np.ndarray:
    """Triangular filters on FFT bin frequencies, each scaled by 2 / bandwidth
    so every filter integrates to the same area in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft_bins)
    fb = np.zeros((n_mels, n_fft_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def mel_filterbank(sample_rate: int, n_fft_bins: int, n_mels: int) -> np.ndarray:
    return _mel_filterbank_cached(sample_rate, n_fft_bins, n_mels).copy()


def _log(x: np.ndarray) -> np.ndarray:
    return np.log(x + LOG_FLOOR)


def _mel_spectrogram(x: np.ndarray, sr: int, window: int, hop: int, n_mels: int) -> np.ndarray:
    mags = stft_mag(x, window, hop)
    fb = _mel_filterbank_cached(sr, window // 2 + 1, n_mels)
    return mags @ fb.T  # (frames, n_mels)


def _mfcc(x: np.ndarray, sr: int, window: int, hop: int, n_mels: int, n_mfcc: int) -> np.ndarray:
    logmel = _log(_mel_spectrogram(x, sr, window, hop, n_mels))
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :n_mfcc]


def _reduce(frames_by_dims: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "avg_time":
        return frames_by_dims.mean(axis=0)
    return frames_by_dims.reshape(-1)  # time-major: frame 0 first


def embedding_dim(cfg: FeatureConfig, n_samples: int) -> int:
    """Embedding length for a given audio length, without touching audio."""
    if cfg.family == "mstft":
        if cfg.reduction == "avg_time":
            return sum(w // 2 + 1 for w, _ in cfg.window_set)
        return sum((w // 2 + 1) * frame_count(n_samples, h) for w, h in cfg.window_set)
    per_frame = cfg.n_mfcc if cfg.family == "mfcc40" else cfg.n_mels
    if cfg.reduction == "avg_time":
        return per_frame
    return per_frame * frame_count(n_samples, cfg.stft_hop)


def embed(buf: AudioBuffer, cfg: FeatureConfig) -> Embedding:
    """Deterministically embed an audio buffer under a feature configuration."""
    if buf.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"buffer rate {buf.sample_rate} != feature config rate {cfg.sample_rate}"
        )
    x = buf.samples.astype(np.float64)
    if cfg.family in ("mel192avg", "mel128"):
        feat = _log(_mel_spectrogram(x, cfg.sample_rate, cfg.stft_window, cfg.stft_hop, cfg.n_mels))
        out = _reduce(feat, cfg.reduction)
    elif cfg.family == "mfcc40":
        feat = _mfcc(x, cfg.sample_rate, cfg.stft_window, cfg.stft_hop, cfg.n_mels, cfg.n_mfcc)
        out = _reduce(feat, cfg.reduction)
    else:
        parts = [
            _reduce(_log(stft_mag(x, w, h)), cfg.reduction) for w, h in cfg.window_set
        ]
        out = np.concatenate(parts)
    return Embedding(out.astype(np.float32), cfg.config_hash())


def embedding_distance(a: Embedding, b: Embedding) -> float:
    """Plain L1 distance; refuses to compare across configurations."""
    if a.config_hash != b.config_hash:
        raise FeatureMismatchError("embeddings were produced by different feature configs")
    if a.dim != b.dim:
        raise FeatureMismatchError("embedding dimensions differ")
    return float(np.abs(a.values.astype(np.float64) - b.values.astype(np.float64)).sum())


# ---------------------------------------------------------------------------
# reference spectral distances between two audio buffers

_METRIC_WINDOW = 1024
_METRIC_HOP = 256
_METRIC_MELS = 128
_METRIC_MFCC = 40
_SC_FLOOR = 1.0e-12  # silence guard: 0/0 compares as 0


def _composite(a_mag: np.ndarray, b_mag: np.ndarray) -> float:
    """Spectral convergence plus mean L1 of log magnitudes; a is reference."""
    num = float(np.linalg.norm(a_mag - b_mag))
    den = float(np.linalg.norm(a_mag))
    sc = num / max(den, _SC_FLOOR) if num > 0.0 else 0.0
    log_l1 = float(np.mean(np.abs(_log(a_mag) - _log(b_mag))))
    return sc + log_l1


def spectral_metrics(a: AudioBuffer, b: AudioBuffer) -> dict[str, float]:
    """Four distances between equal-length buffers: stft, mel, mstft, mfccd.

    ``a`` is the reference for the spectral-convergence normalizations.
    """
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rates differ")
    if a.samples.shape != b.samples.shape:
        raise ValueError("buffer lengths differ")
    xa = a.samples.astype(np.float64)
    xb = b.samples.astype(np.float64)
    sr = a.sample_rate

    mag_a = stft_mag(xa, _METRIC_WINDOW, _METRIC_HOP)
    mag_b = stft_mag(xb, _METRIC_WINDOW, _METRIC_HOP)
    fb = _mel_filterbank_cached(sr, _METRIC_WINDOW // 2 + 1, _METRIC_MELS)
    mel_a = mag_a @ fb.T
    mel_b = mag_b @ fb.T

    mstft = float(
        np.mean([_composite(stft_mag(xa, w, h), stft_mag(xb, w, h)) for w, h in MSTFT_WINDOWS])
    )
    dct = lambda m: scipy.fft.dct(_log(m), type=2, norm="ortho", axis=1)[:, :_METRIC_MFCC]
    mfccd = float(np.mean(np.abs(dct(mel_a) - dct(mel_b))))

    return {
        "stft": _composite(mag_a, mag_b),
        "mel": _composite(mel_a, mel_b),
        "mstft": mstft,
        "mfccd": mfccd,
    }
