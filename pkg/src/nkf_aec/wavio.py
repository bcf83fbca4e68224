"""Mono 16 kHz WAV reading and writing (PCM16 or 32-bit float)."""

import numpy as np
from scipy.io import wavfile

from .errors import InvalidConfig
from .signal import SAMPLE_RATE


def read_wav(path, sample_rate=SAMPLE_RATE):
    """Read a mono WAV file as float64 in [-1, 1).

    Raises InvalidConfig on a sample rate other than ``sample_rate``, on
    multi-channel data, or on an unsupported sample format.
    """
    sr, data = wavfile.read(path)
    if sr != sample_rate:
        raise InvalidConfig(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz")
    if data.ndim != 1:
        raise InvalidConfig(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise InvalidConfig(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, samples, sample_rate=SAMPLE_RATE, fmt="pcm16"):
    """Write mono audio. ``fmt`` is ``"pcm16"`` (clipped) or ``"float32"``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InvalidConfig("write_wav expects a 1-D signal")
    if fmt == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = samples.astype(np.float32)
    else:
        raise InvalidConfig(f"unknown wav format {fmt!r}")
    wavfile.write(path, sample_rate, data)
