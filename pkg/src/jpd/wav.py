"""16-bit PCM mono WAV input/output."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile


def write_wav(path: str, x, sample_rate: int) -> None:
    """Write float samples in [-1, 1) as 16-bit signed little-endian PCM."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("only mono audio is supported")
    if not np.all(np.isfinite(x)):
        raise ValueError("audio contains non-finite samples")
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(sample_rate), pcm)


def read_wav(path: str) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 in [-1, 1); stereo files are averaged to mono."""
    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        if data.dtype == np.uint8:
            x = (data.astype(float) - 128.0) / 128.0
        else:
            x = data.astype(float) / scale
    else:
        x = data.astype(float)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)
