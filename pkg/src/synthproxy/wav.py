"""WAV import/export and sample-rate conversion for out-of-domain audio."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from synthproxy.synths import AudioBuffer


class WavReadError(ValueError):
    """File is not a readable PCM/float WAV."""


def export_wav(buf: AudioBuffer, path: str | Path) -> None:
    """Write mono 16-bit PCM."""
    x = np.clip(buf.samples.astype(np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(str(path), buf.sample_rate, pcm)


def import_wav(path: str | Path) -> AudioBuffer:
    """Read 16/24-bit PCM or 32-bit float WAV; multichannel is mean-downmixed."""
    try:
        sr, data = scipy.io.wavfile.read(str(path))
    except Exception as exc:
        raise WavReadError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy widens 24-bit PCM into the top bytes of int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise WavReadError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioBuffer(x.astype(np.float32), int(sr))


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Windowed-sinc (polyphase Kaiser FIR) resampling."""
    if buf.sample_rate == target_rate:
        return buf
    ratio = Fraction(target_rate, buf.sample_rate).limit_denominator(1000)
    y = scipy.signal.resample_poly(buf.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return AudioBuffer(y.astype(np.float32), target_rate)


def fit_length(buf: AudioBuffer, n_samples: int) -> AudioBuffer:
    """Trim or zero-pad to an exact sample count."""
    x = buf.samples
    if x.shape[0] > n_samples:
        x = x[:n_samples]
    elif x.shape[0] < n_samples:
        x = np.concatenate([x, np.zeros(n_samples - x.shape[0], dtype=np.float32)])
    return AudioBuffer(x, buf.sample_rate)
