"""Loss functions: active-level normalization, CCMSE, soft threshold, SI-SDR and uPIT.

All functions are pure evaluators on numpy arrays; nothing here is differentiable.
dB-valued results are clamped to [-300, 300] instead of returning infinities.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from rtsep.errors import ConfigError, DomainError, SizeError
from rtsep.spectral import DEFAULT_STFT, StftConfig, stft

DB_CLAMP = 300.0
ACTIVE_FLOOR_DB = -50.0
ACTIVE_FRAME = 320  # 20 ms at 16 kHz
ACTIVE_LEVEL_VERSION = 1


def clamp_db(value: float) -> float:
    if np.isnan(value):
        raise DomainError("dB value is NaN")
    return float(min(DB_CLAMP, max(-DB_CLAMP, value)))


def is_clamped(value: float) -> bool:
    return abs(value) >= DB_CLAMP


@dataclass(frozen=True)
class LossConfig:
    compression: float = 0.5  # c
    phase_weight: float = 1.0  # lambda
    threshold: float | None = 0.1  # tau; None disables the soft threshold

    def __post_init__(self):
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression c must be in (0, 1], got {self.compression}")
        if not 0.0 <= self.phase_weight <= 1.0:
            raise ConfigError(f"phase weight lambda must be in [0, 1], got {self.phase_weight}")
        if self.threshold is not None and self.threshold < 0:
            raise ConfigError(f"soft threshold tau must be >= 0, got {self.threshold}")

    @classmethod
    def from_db(cls, compression=0.5, phase_weight=1.0, threshold_db: float | None = -10.0) -> "LossConfig":
        """``threshold_db`` of None (or -inf) disables the threshold; otherwise tau = 10^(dB/10)."""
        if threshold_db is None or threshold_db == -np.inf:
            return cls(compression, phase_weight, None)
        return cls(compression, phase_weight, 10.0 ** (threshold_db / 10.0))


class LevelResult(NamedTuple):
    signal: np.ndarray
    gain: float
    silent: bool


def active_mask(signal, frame: int = ACTIVE_FRAME, floor_db: float = ACTIVE_FLOOR_DB) -> np.ndarray:
    """Per-sample boolean mask of frames whose energy is within ``floor_db`` of the peak frame."""
    x = np.asarray(signal, dtype=np.float64)
    n_frames = -(-len(x) // frame)
    padded = np.zeros(n_frames * frame)
    padded[: len(x)] = x
    energy = np.sum(padded.reshape(n_frames, frame) ** 2, axis=1)
    peak = energy.max() if n_frames else 0.0
    if peak <= 0:
        return np.zeros(len(x), bool)
    keep = energy > peak * 10.0 ** (floor_db / 10.0)
    return np.repeat(keep, frame)[: len(x)]


def active_rms(signal, frame: int = ACTIVE_FRAME, floor_db: float = ACTIVE_FLOOR_DB) -> float:
    x = np.asarray(signal, dtype=np.float64)
    mask = active_mask(x, frame, floor_db)
    if not mask.any():
        return 0.0
    return float(np.sqrt(np.mean(x[mask] ** 2)))


def active_level_normalize(signal, frame: int = ACTIVE_FRAME, floor_db: float = ACTIVE_FLOOR_DB) -> LevelResult:
    """Scale ``signal`` so its RMS over active frames is 1.

    Active frames are non-overlapping ``frame``-sample blocks whose energy exceeds the
    loudest block's energy minus ``floor_db``. An all-zero signal comes back unchanged
    with gain 1 and ``silent=True``.
    """
    x = np.asarray(signal, dtype=np.float64)
    rms = active_rms(x, frame, floor_db)
    if rms == 0.0:
        return LevelResult(x.copy(), 1.0, True)
    gain = 1.0 / rms
    return LevelResult(x * gain, gain, False)


def _compress(spec, c):
    if c == 1.0:
        return spec
    mag = np.abs(spec)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (c - 1.0)
    return spec * scale


def ccmse(target, estimate, compression: float = 0.5, phase_weight: float = 1.0) -> float:
    """Complex compressed MSE between two complex spectrograms of equal shape.

    ``(1 - lam) * mean(| |S|^c - |S_hat|^c |^2) + lam * mean(| |S|^c e^{j phi_S} - |S_hat|^c e^{j phi_S_hat} |^2)``
    """
    LossConfig(compression, phase_weight, None)
    s = np.asarray(target)
    e = np.asarray(estimate)
    if s.shape != e.shape:
        raise SizeError(f"target shape {s.shape} != estimate shape {e.shape}")
    sc = _compress(s, compression)
    ec = _compress(e, compression)
    mag_term = np.mean((np.abs(sc) - np.abs(ec)) ** 2)
    cplx_term = np.mean(np.abs(sc - ec) ** 2)
    return float((1.0 - phase_weight) * mag_term + phase_weight * cplx_term)


def soft_threshold(loss_value: float, tau: float) -> float:
    """``10 log10(loss + tau)``, floored at -300 when both are zero."""
    if loss_value < 0 or tau < 0:
        raise DomainError(f"loss and tau must be non-negative, got {loss_value}, {tau}")
    total = loss_value + tau
    if total <= 0:
        return -DB_CLAMP
    return clamp_db(10.0 * np.log10(total))


def level_normalized_pair(target, estimate, stft_config: StftConfig = DEFAULT_STFT):
    """STFTs of a time-domain target/estimate pair, both scaled by the target's active-level gain."""
    t = np.asarray(target, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if t.shape != e.shape:
        raise SizeError(f"target length {t.shape} != estimate length {e.shape}")
    gain = active_level_normalize(t).gain
    return stft(t * gain, stft_config).T, stft(e * gain, stft_config).T


def time_ccmse(target, estimate, config: LossConfig = LossConfig(), thresholded: bool = True) -> float:
    """CCMSE of level-normalized time-domain signals, optionally passed through the soft threshold."""
    s, e = level_normalized_pair(target, estimate)
    loss = ccmse(s, e, config.compression, config.phase_weight)
    if thresholded and config.threshold is not None:
        return soft_threshold(loss, config.threshold)
    return loss


def si_sdr(target, estimate) -> float:
    """Scale-invariant SDR in dB, clamped to +-300."""
    s = np.asarray(target, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise SizeError(f"target length {s.shape} != estimate length {e.shape}")
    energy = float(np.dot(s, s))
    if energy == 0.0:
        raise DomainError("SI-SDR is undefined for an all-zero target")
    alpha = float(np.dot(e, s)) / energy
    proj = alpha * s
    num = float(np.dot(proj, proj))
    den = float(np.sum((proj - e) ** 2))
    if den == 0.0:
        return DB_CLAMP
    if num == 0.0:
        return -DB_CLAMP
    return clamp_db(10.0 * np.log10(num / den))


def neg_si_sdr(target, estimate) -> float:
    return -si_sdr(target, estimate)


def ccmse_metric(config: LossConfig = LossConfig()) -> Callable:
    """Pair metric for :func:`upit_assign`: thresholded CCMSE on time-domain signals."""
    return lambda target, estimate: time_ccmse(target, estimate, config, thresholded=True)


class Assignment(NamedTuple):
    permutation: tuple  # estimate index assigned to each target
    loss: float


def upit_assign(targets, estimates, metric: Callable = neg_si_sdr) -> Assignment:
    """Exhaustive utterance-level permutation search.

    Evaluates ``metric(targets[r], estimates[perm[r]])`` for all R! permutations and
    returns the one with the smallest summed loss; ties go to the lexicographically
    smallest permutation.
    """
    if len(targets) != len(estimates):
        raise SizeError(f"{len(targets)} targets but {len(estimates)} estimates")
    r = len(targets)
    pair = np.array([[metric(targets[i], estimates[j]) for j in range(r)] for i in range(r)])
    best = None
    for perm in itertools.permutations(range(r)):
        total = float(sum(pair[i, perm[i]] for i in range(r)))
        if best is None or total < best.loss:
            best = Assignment(perm, total)
    return best
