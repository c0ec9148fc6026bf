"""Streaming STFT analysis/synthesis, feature compression and deep-filter (CTF) application.

Spectra are plain complex128 arrays of shape ``(..., bins)``. A CTF tap set for one
frame has shape ``(..., bins, time_taps, freq_taps)``; ``taps[k, lag, j]`` multiplies
bin ``k + j - freq_taps // 2`` of the frame ``lag`` hops in the past. Histories are
stored lag-ordered as well: ``history[0]`` is the current frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rtsep.errors import ConfigError, InputError, SizeError

# Inter-stage spectra are snapped to this fixed-point grid so that sums and
# differences of spectra (subtractive separation) are exact in float64.
SPECTRAL_QUANTUM = 2.0**-28


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 320
    hop: int = 160
    fft_size: int = 320
    sample_rate: int = 16000

    def __post_init__(self):
        if self.hop * 2 != self.window_len:
            raise ConfigError("hop must be exactly half the window length (50% overlap)")
        if self.fft_size < self.window_len:
            raise ConfigError("fft_size must be >= window_len")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def delay(self) -> int:
        """Output-index delay of an analysis -> synthesis round trip, in samples."""
        return self.window_len - self.hop

    @property
    def latency(self) -> int:
        """Algorithmic latency in samples: the round-trip delay plus one hop of block buffering."""
        return self.delay + self.hop

    def window(self) -> np.ndarray:
        n = np.arange(self.window_len)
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len))


DEFAULT_STFT = StftConfig()


def _check_samples(samples, hop):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape != (hop,):
        raise SizeError(f"expected {hop} samples, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise InputError("input samples contain NaN or Inf")
    return samples


def _check_spectrum(spectrum, bins):
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1:] != (bins,):
        raise SizeError(f"expected {bins} bins, got shape {spectrum.shape}")
    return spectrum


class AnalysisState:
    """Rolling input buffer; each :meth:`push` consumes one hop and returns one spectrum."""

    def __init__(self, config: StftConfig = DEFAULT_STFT):
        self.config = config
        self._window = config.window()
        self.buffer = np.zeros(config.window_len)

    def reset(self):
        self.buffer[:] = 0.0

    def push(self, samples) -> np.ndarray:
        cfg = self.config
        samples = _check_samples(samples, cfg.hop)
        self.buffer[:-cfg.hop] = self.buffer[cfg.hop:]
        self.buffer[-cfg.hop:] = samples
        return np.fft.rfft(self.buffer * self._window, cfg.fft_size)


class SynthesisState:
    """Overlap-add accumulator; each :meth:`push` consumes one spectrum and emits one hop."""

    def __init__(self, config: StftConfig = DEFAULT_STFT):
        self.config = config
        self._window = config.window()
        self.accum = np.zeros(config.window_len)

    def reset(self):
        self.accum[:] = 0.0

    def push(self, spectrum) -> np.ndarray:
        cfg = self.config
        spectrum = _check_spectrum(spectrum, cfg.bins)
        frame = np.fft.irfft(spectrum, cfg.fft_size)[: cfg.window_len] * self._window
        self.accum += frame
        out = self.accum[: cfg.hop].copy()
        self.accum[:-cfg.hop] = self.accum[cfg.hop:]
        self.accum[-cfg.hop:] = 0.0
        return out


def analysis_push(state: AnalysisState, samples) -> np.ndarray:
    return state.push(samples)


def synthesis_push(state: SynthesisState, spectrum) -> np.ndarray:
    return state.push(spectrum)


def pad_to_hop(x, hop: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rem = (-len(x)) % hop
    return np.concatenate([x, np.zeros(rem)]) if rem else x


def stft(x, config: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Whole-signal analysis with the same framing as repeated :func:`analysis_push` calls.

    Returns ``(frames, bins)``; the signal is zero-padded to a multiple of the hop.
    """
    x = pad_to_hop(x, config.hop)
    if not np.all(np.isfinite(x)):
        raise InputError("input samples contain NaN or Inf")
    padded = np.concatenate([np.zeros(config.window_len - config.hop), x])
    frames = sliding_window_view(padded, config.window_len)[:: config.hop]
    return np.fft.rfft(frames * config.window(), config.fft_size, axis=-1)


def istft(spec, config: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Inverse of :func:`stft` with streaming alignment: output hop ``n`` is what
    :func:`synthesis_push` emits after receiving frame ``n``."""
    spec = _check_spectrum(spec, config.bins)
    frames = np.fft.irfft(spec, config.fft_size, axis=-1)[:, : config.window_len] * config.window()
    n = len(frames)
    out = np.zeros((n + 1) * config.hop)
    # with 50% overlap every output hop is the sum of two half-frames
    out[: n * config.hop] += frames[:, : config.hop].reshape(-1)
    out[config.hop:] += frames[:, config.hop:].reshape(-1)
    return out[: n * config.hop]


def compress_features(spectrum, exponent: float = 0.5) -> np.ndarray:
    """Magnitude-compress a spectrum, keeping its phase; returns ``(..., 2, bins)``
    with the real part in channel 0 and the imaginary part in channel 1."""
    if not 0.0 < exponent <= 1.0:
        raise ConfigError(f"compression exponent must be in (0, 1], got {exponent}")
    spectrum = np.asarray(spectrum)
    if exponent == 1.0:
        c = spectrum
    else:
        mag = np.abs(spectrum)
        scale = np.zeros_like(mag)
        nz = mag > 0
        scale[nz] = mag[nz] ** (exponent - 1.0)
        c = spectrum * scale
    return np.stack([c.real, c.imag], axis=-2)


def decompress_features(features, exponent: float = 0.5) -> np.ndarray:
    if not 0.0 < exponent <= 1.0:
        raise ConfigError(f"compression exponent must be in (0, 1], got {exponent}")
    features = np.asarray(features)
    c = features[..., 0, :] + 1j * features[..., 1, :]
    if exponent == 1.0:
        return c
    mag = np.abs(c)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (1.0 / exponent - 1.0)
    return c * scale


def apply_ctf(history, taps) -> np.ndarray:
    """Filter a lag-ordered spectrum history with per-bin complex taps.

    Args:
        history: ``(..., time_taps, bins)``, ``history[..., 0, :]`` is the current frame.
        taps: ``(..., bins, time_taps, freq_taps)``; ``freq_taps`` must be odd.

    Returns:
        ``(..., bins)`` filtered spectrum. Frequency taps past the band edges are dropped.
    """
    history = np.asarray(history)
    taps = np.asarray(taps)
    t_taps, bins = history.shape[-2:]
    if taps.shape[-3:-1] != (bins, t_taps) or taps.shape[-1] % 2 == 0:
        raise SizeError(f"taps shape {taps.shape} does not fit history shape {history.shape}")
    half = taps.shape[-1] // 2
    pad = [(0, 0)] * (history.ndim - 1) + [(half, half)]
    windows = sliding_window_view(np.pad(history, pad), taps.shape[-1], axis=-1)
    # windows: (..., time_taps, bins, freq_taps)
    return np.einsum("...tkf,...ktf->...k", windows, taps)


def lag_stack(spec, time_taps: int) -> np.ndarray:
    """``(frames, bins)`` -> ``(frames, time_taps, bins)`` lag-ordered histories, zero before frame 0."""
    spec = np.asarray(spec)
    n = spec.shape[-2]
    padded = np.concatenate([np.zeros(spec.shape[:-2] + (time_taps - 1, spec.shape[-1]), spec.dtype), spec], axis=-2)
    out = np.stack([padded[..., time_taps - 1 - lag: time_taps - 1 - lag + n, :] for lag in range(time_taps)], axis=-2)
    return out


class SpectrumHistory:
    """Ring of the last ``time_taps`` input spectra for streaming CTF filtering."""

    def __init__(self, time_taps: int, bins: int, batch: tuple = ()):
        self.frames = np.zeros(batch + (time_taps, bins), dtype=np.complex128)

    def reset(self):
        self.frames[:] = 0.0

    def push(self, spectrum) -> np.ndarray:
        self.frames[..., 1:, :] = self.frames[..., :-1, :]
        self.frames[..., 0, :] = spectrum
        return self.frames


def snap(spectrum) -> np.ndarray:
    """Round real and imaginary parts to multiples of :data:`SPECTRAL_QUANTUM`."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    q = SPECTRAL_QUANTUM
    out = np.empty_like(spectrum)
    out.real = np.round(spectrum.real / q) * q
    out.imag = np.round(spectrum.imag / q) * q
    return out
