"""STFT analysis/synthesis and convolutive-transfer-function helpers.

Frames are laid out as ``(num_frames, num_bins)``. The signal is zero-padded
with ``window_length - hop_size`` samples at the front, and at the back so that
every input sample is covered by ``window_length // hop_size`` full frames:

    num_frames = ceil(n / hop) + window_length // hop - 1

so (1024, 1024, 256) on 8 s at 16 kHz gives 503 frames and 513 bins.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidConfig, ShapeError

SAMPLE_RATE = 16000


class WindowKind(str, enum.Enum):
    HANN = "hann"
    SQRT_HANN = "sqrt_hann"


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    window_length: int = 1024
    hop_size: int = 256
    window_kind: WindowKind = WindowKind.SQRT_HANN

    def __post_init__(self):
        object.__setattr__(self, "window_kind", WindowKind(self.window_kind))
        if self.fft_size <= 0 or self.hop_size <= 0:
            raise InvalidConfig("fft_size and hop_size must be positive")
        if self.window_length != self.fft_size:
            raise InvalidConfig("window_length must equal fft_size")
        if self.window_length % self.hop_size:
            raise InvalidConfig("hop_size must divide window_length")
        wa, ws = _windows(self)
        ola = _overlap_sum(wa * ws, self.hop_size)
        if not np.allclose(ola, 1.0, rtol=0, atol=1e-10):
            raise InvalidConfig(
                f"window {self.window_kind.value} does not satisfy COLA at hop {self.hop_size}"
            )

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1

    @property
    def overlap(self):
        return self.window_length // self.hop_size

    def num_frames(self, num_samples):
        return math.ceil(num_samples / self.hop_size) + self.overlap - 1

    def windows(self):
        """Return ``(analysis, synthesis)`` windows, normalized so that their
        product overlap-adds to exactly one."""
        return _windows(self)


def _overlap_sum(w, hop):
    n = len(w)
    out = np.zeros(hop)
    for i in range(0, n, hop):
        out += w[i:i + hop]
    return out


def _windows(config):
    n, hop = config.window_length, config.hop_size
    # periodic Hann, which sums to n / (2 hop) at any hop dividing n / 2
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if config.window_kind is WindowKind.SQRT_HANN:
        w = np.sqrt(hann * 2.0 * hop / n)
        return w, w
    return hann * 2.0 * hop / n, np.ones(n)


def stft(x, config=StftConfig(), dtype=np.complex128):
    """Short-time Fourier transform of a real signal.

    Parameters
    ----------
    x : array_like
        Real time signal, 1-D.
    config : StftConfig
    dtype : numpy dtype
        ``complex128`` (default) or ``complex64``.

    Returns
    -------
    ndarray of shape (num_frames, num_bins)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("stft expects a 1-D signal")
    if x.size == 0:
        raise EmptyInput("cannot transform an empty signal")
    n, hop = config.window_length, config.hop_size
    frames = config.num_frames(len(x))
    total = (frames - 1) * hop + n
    padded = np.zeros(total)
    padded[n - hop:n - hop + len(x)] = x
    wa, _ = config.windows()
    segs = np.lib.stride_tricks.sliding_window_view(padded, n)[::hop]
    spec = np.fft.rfft(segs * wa, n=config.fft_size, axis=-1)
    return spec.astype(dtype, copy=False)


def istft(spec, config=StftConfig(), length=None):
    """Inverse of :func:`stft` by weighted overlap-add.

    ``length`` trims the output; by default ``(num_frames - overlap + 1) * hop``
    samples are returned, which covers any signal that produced ``spec``.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != config.num_bins:
        raise InvalidConfig(
            f"spectrogram shape {spec.shape} inconsistent with {config.num_bins} bins"
        )
    n, hop = config.window_length, config.hop_size
    frames = spec.shape[0]
    if frames < config.overlap:
        raise InvalidConfig("too few frames for this configuration")
    _, ws = config.windows()
    segs = np.fft.irfft(spec, n=config.fft_size, axis=-1)[:, :n] * ws
    out = np.zeros((frames - 1) * hop + n)
    # overlap-add one phase at a time; frames of the same phase do not overlap
    for r in range(config.overlap):
        chunk = segs[r::config.overlap].reshape(-1)
        start = r * hop
        out[start:start + chunk.size] += chunk
    full = (frames - config.overlap + 1) * hop
    if length is None:
        length = full
    if length > full:
        raise InvalidConfig(f"requested length {length} exceeds {full} reconstructable samples")
    return out[n - hop:n - hop + length]


def ctf_stack(far_spec, m, k, taps):
    """Stack ``[X[m,k], X[m-1,k], ..., X[m-L+1,k]]`` with zeros before frame 0."""
    far_spec = np.asarray(far_spec)
    frames, bins = far_spec.shape
    if not (0 <= m < frames and 0 <= k < bins):
        raise IndexError(f"frame {m} / bin {k} outside spectrogram of shape {far_spec.shape}")
    if taps < 1:
        raise InvalidConfig("taps must be >= 1")
    out = np.zeros(taps, dtype=far_spec.dtype)
    avail = min(taps, m + 1)
    out[:avail] = far_spec[m::-1, k][:avail]
    return out


def ctf_frames(far_spec, taps):
    """All CTF input vectors at once, shape ``(frames, bins, taps)``.

    ``ctf_frames(X, L)[m, k] == ctf_stack(X, m, k, L)``.
    """
    far_spec = np.asarray(far_spec)
    frames, bins = far_spec.shape
    out = np.zeros((frames, bins, taps), dtype=far_spec.dtype)
    for l in range(taps):
        out[l:, :, l] = far_spec[:frames - l]
    return out


def apply_ctf(h, x):
    """``h^H x``: conjugate the filter, multiply, and sum over the last axis."""
    h = np.asarray(h)
    x = np.asarray(x)
    if h.shape[-1] != x.shape[-1]:
        raise ShapeError(f"filter length {h.shape[-1]} != input length {x.shape[-1]}")
    return np.sum(np.conj(h) * x, axis=-1)
