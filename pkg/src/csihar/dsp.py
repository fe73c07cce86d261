"""CSI preprocessing: filtering, normalization, spectral features, windowing.

All functions are pure.  Multichannel inputs are laid out [channels x time]
and processed per channel along the last axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from csihar.errors import ConfigError


@dataclass(frozen=True)
class FilterSpec:
    cutoff_hz: float = 2.0
    sample_rate_hz: float = 100.0
    kind: str = "highpass"
    order: int = 2

    def __post_init__(self):
        if self.kind != "highpass":
            raise ConfigError(f"unsupported filter kind {self.kind!r}", "kind")
        if self.order != 2:
            raise ConfigError("only second-order sections are supported", "order")
        if self.sample_rate_hz <= 0:
            raise ConfigError("must be positive", "sample_rate_hz")
        if not 0 < self.cutoff_hz < self.sample_rate_hz / 2:
            raise ConfigError(
                f"cutoff {self.cutoff_hz} Hz must lie in (0, {self.sample_rate_hz / 2}) Hz",
                "cutoff_hz")


@dataclass(frozen=True)
class WindowSpec:
    length: int = 250
    stride: int = 125

    def __post_init__(self):
        if self.length < 1 or self.stride < 1:
            raise ConfigError("length and stride must be positive", "length")
        if self.stride > self.length:
            raise ConfigError(f"stride {self.stride} exceeds length {self.length}", "stride")


@dataclass(frozen=True)
class SpectrogramSpec:
    fft_size: int = 64
    hop: int = 32
    window_fn: str = "hann"

    def __post_init__(self):
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"{self.fft_size} is not a power of two", "fft_size")
        if not 1 <= self.hop <= self.fft_size:
            raise ConfigError(f"hop must be in 1..{self.fft_size}", "hop")
        if self.window_fn != "hann":
            raise ConfigError(f"unsupported window {self.window_fn!r}", "window_fn")


# ---------------------------------------------------------------------------
# noise reduction
# ---------------------------------------------------------------------------

def butter2_highpass_coefficients(spec: FilterSpec):
    """Second-order Butterworth high-pass via the prewarped bilinear transform.

    Returns ``(b, a)`` with ``a[0] == 1`` so that
    ``y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]``.
    """
    k = math.tan(math.pi * spec.cutoff_hz / spec.sample_rate_hz)
    norm = 1.0 / (1.0 + math.sqrt(2.0) * k + k * k)
    b = np.array([norm, -2.0 * norm, norm])
    a = np.array([1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - math.sqrt(2.0) * k + k * k) * norm])
    return b, a


def highpass(signal, spec: FilterSpec) -> np.ndarray:
    """Filter along the last axis starting from zero state; length is preserved."""
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("signal must contain at least one sample")
    b, a = butter2_highpass_coefficients(spec)
    return lfilter(b, a, x, axis=-1)


def highpass_gain(freq_hz, spec: FilterSpec) -> np.ndarray:
    """|H(f)| of the designed biquad evaluated from its coefficients."""
    b, a = butter2_highpass_coefficients(spec)
    z1 = np.exp(-2j * np.pi * np.asarray(freq_hz, dtype=np.float64) / spec.sample_rate_hz)
    return np.abs((b[0] + b[1] * z1 + b[2] * z1 ** 2) / (a[0] + a[1] * z1 + a[2] * z1 ** 2))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

NORMALIZE_MODES = ("amplitude_zscore", "amplitude_phase_zscore")


def zscore(x, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    """Population z-score along ``axis``; lanes with std below ``eps`` become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    flat = sd < eps
    out = (x - mu) / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def unwrap_phase(phase, axis: int = -1) -> np.ndarray:
    return np.unwrap(np.asarray(phase, dtype=np.float64), axis=axis)


def detrend_linear(x) -> np.ndarray:
    """Remove the least-squares line from each row (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        return x - x.mean(axis=-1, keepdims=True)
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    slope = (x - x.mean(axis=-1, keepdims=True)) @ tc / (tc @ tc)
    return x - x.mean(axis=-1, keepdims=True) - slope[..., None] * tc


def normalize(sample, mode: str = "amplitude_zscore") -> np.ndarray:
    """Per-channel z-scoring of a [channels x time] sample.

    In ``amplitude_phase_zscore`` mode the channel axis holds amplitude
    channels followed by the same number of phase channels; phase rows are
    unwrapped and linearly detrended before scaling.
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected [channels x time], got shape {x.shape}")
    if mode == "amplitude_zscore":
        return zscore(x)
    if mode == "amplitude_phase_zscore":
        c = x.shape[0]
        if c % 2:
            raise ConfigError(f"amplitude+phase layout needs an even channel count, got {c}",
                              "mode")
        amp, phase = x[: c // 2], x[c // 2:]
        phase = detrend_linear(unwrap_phase(phase))
        return np.concatenate([zscore(amp), zscore(phase)], axis=0)
    raise ConfigError(f"unknown mode {mode!r}; choose from {NORMALIZE_MODES}", "mode")


# ---------------------------------------------------------------------------
# Fourier
# ---------------------------------------------------------------------------

def dft_direct(signal) -> np.ndarray:
    """O(N^2) evaluation of X[k] = sum_n x[n] exp(-2 pi i k n / N) along the last axis."""
    x = np.asarray(signal)
    n = x.shape[-1]
    idx = np.arange(n)
    # reduce k*n mod N first so large products keep full phase precision
    w = np.exp(-2j * np.pi * ((np.outer(idx, idx) % n) / n))
    return x @ w.T


_FFT_BASE = 8


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    """Radix-2 decimation in time for power-of-two N along the last axis.

    Strided subsequences of length ``min(N, 8)`` are transformed directly,
    then merged pairwise with twiddle factors until the full length is reached.
    """
    n = x.shape[-1]
    lead = x.shape[:-1]
    base = min(n, _FFT_BASE)
    k = np.arange(base)
    m = np.exp(-2j * np.pi * np.outer(k, k) / base)
    # column c of the reshaped input is the subsequence x[c], x[c + L], x[c + 2L], ...
    sub = x.reshape(*lead, base, n // base)
    out = np.moveaxis(np.tensordot(sub, m, axes=([-2], [1])), -1, -2)
    while out.shape[-2] < n:
        size = out.shape[-2]
        half = out.shape[-1] // 2
        even, odd = out[..., :half], out[..., half:]
        tw = np.exp(-1j * np.pi * np.arange(size) / size)[:, None] * odd
        merged = np.empty(lead + (2 * size, half), dtype=np.complex128)
        np.add(even, tw, out=merged[..., :size, :])
        np.subtract(even, tw, out=merged[..., size:, :])
        out = merged
    return out.reshape(*lead, n)


def dft(signal) -> np.ndarray:
    """Discrete Fourier transform along the last axis.

    Power-of-two lengths use an iterative radix-2 FFT; other lengths fall
    back to direct summation.
    """
    x = np.asarray(signal)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("dft needs at least one sample")
    if n & (n - 1) == 0:
        return _fft_radix2(x)
    return dft_direct(x)


def idft(spectrum) -> np.ndarray:
    s = np.asarray(spectrum, dtype=np.complex128)
    return np.conj(dft(np.conj(s))) / s.shape[-1]


# ---------------------------------------------------------------------------
# wavelets
# ---------------------------------------------------------------------------

@dataclass
class HaarCoefficients:
    """Haar pyramid: final approximation plus detail bands, finest level first."""

    approx: np.ndarray
    details: list = field(default_factory=list)
    pad: int = 0
    length: int = 0

    @property
    def levels(self) -> int:
        return len(self.details)

    def energy(self) -> float:
        return float(np.sum(self.approx ** 2) + sum(np.sum(d ** 2) for d in self.details))


_SQRT2 = math.sqrt(2.0)


def haar_dwt(signal, levels: int) -> HaarCoefficients:
    """Multi-level orthonormal Haar transform along the last axis.

    Inputs whose length is not a multiple of ``2**levels`` are padded by
    repeating the final sample; ``pad`` records how many were added.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    if levels < 1:
        raise ConfigError("levels must be positive", "levels")
    block = 1 << levels
    if block > n:
        raise ConfigError(f"{levels} levels need at least {block} samples, got {n}", "levels")
    pad = (-n) % block
    if pad:
        x = np.concatenate([x, np.repeat(x[..., -1:], pad, axis=-1)], axis=-1)
    details = []
    approx = x
    for _ in range(levels):
        even, odd = approx[..., 0::2], approx[..., 1::2]
        details.append((even - odd) / _SQRT2)
        approx = (even + odd) / _SQRT2
    return HaarCoefficients(approx=approx, details=details, pad=pad, length=n)


def haar_idwt(coeffs: HaarCoefficients) -> np.ndarray:
    approx = coeffs.approx
    for detail in reversed(coeffs.details):
        out = np.empty(approx.shape[:-1] + (approx.shape[-1] * 2,))
        out[..., 0::2] = (approx + detail) / _SQRT2
        out[..., 1::2] = (approx - detail) / _SQRT2
        approx = out
    return approx[..., : coeffs.length]


# ---------------------------------------------------------------------------
# Doppler profile
# ---------------------------------------------------------------------------

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def spectrogram_frames(length: int, spec: SpectrogramSpec) -> int:
    return (length - spec.fft_size) // spec.hop + 1 if length >= spec.fft_size else 0


def doppler_spectrogram(window, spec: SpectrogramSpec) -> np.ndarray:
    """Channel-averaged Hann STFT magnitude, shape [fft_size//2 + 1 x frames]."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    t = x.shape[-1]
    if t < spec.fft_size:
        raise ConfigError(f"time length {t} shorter than fft_size {spec.fft_size}", "fft_size")
    x = x - x.mean(axis=-1, keepdims=True)
    n_frames = spectrogram_frames(t, spec)
    starts = np.arange(n_frames) * spec.hop
    frames = x[:, starts[:, None] + np.arange(spec.fft_size)]  # [C, F, N]
    mag = np.abs(dft(frames * hann(spec.fft_size))[..., : spec.fft_size // 2 + 1])
    return mag.mean(axis=0).T


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

@dataclass
class Windows:
    """Segments of a stream; ``short`` flags a stream shorter than one window."""

    segments: list
    offsets: list
    short: bool = False

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(zip(self.offsets, self.segments))


def sliding_windows(series, spec: WindowSpec) -> Windows:
    x = np.asarray(series)
    t = x.shape[-1]
    if t < spec.length:
        warnings.warn(f"series of length {t} shorter than window {spec.length}; no windows",
                      stacklevel=2)
        return Windows(segments=[], offsets=[], short=True)
    offsets = list(range(0, t - spec.length + 1, spec.stride))
    return Windows(segments=[x[..., o:o + spec.length].copy() for o in offsets], offsets=offsets)
