"""Synthetic reverberant mixtures: shoebox image-source RIRs, early-reflection targets,
SNR-controlled noise mixing and a small set of augmentations.

Everything here is a pure function of its arguments and an integer seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from rtsep.audio_io import write_wav
from rtsep.errors import ConfigError, GeometryError, InputError
from rtsep.objectives import active_rms

SCHEMA_VERSION = 1
SPEED_OF_SOUND = 343.0
EARLY_WINDOW_S = 0.050
EARLY_FADE_S = 0.002
SILENCE_FADE_S = 0.010
SINC_HALF_WIDTH = 40  # taps each side of a fractional-delay impulse
DIM_RANGE = (3.0, 30.0)
COEF_RANGE = (0.0, 0.92)


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room with one microphone and one or more sources.

    ``reflection`` holds pressure reflection coefficients for the walls in the order
    x=0, x=Lx, y=0, y=Ly, z=0, z=Lz. A single number is used for all six walls.
    ``rir_length`` is in samples; None sizes the RIR to the latest image arrival.
    """

    dimensions: tuple
    sources: tuple
    mic: tuple
    reflection: tuple = (0.5,) * 6
    max_order: int = 10
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate: int = 16000
    rir_length: int | None = None
    fractional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        object.__setattr__(self, "mic", tuple(float(m) for m in self.mic))
        srcs = self.sources
        if len(srcs) and np.ndim(srcs[0]) == 0:
            srcs = (srcs,)
        object.__setattr__(self, "sources", tuple(tuple(float(v) for v in s) for s in srcs))
        refl = self.reflection
        if np.ndim(refl) == 0:
            refl = (refl,) * 6
        object.__setattr__(self, "reflection", tuple(float(b) for b in refl))
        self.validate()

    def validate(self):
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise GeometryError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        if not self.sources:
            raise GeometryError("room needs at least one source")
        for name, pos in [("mic", self.mic)] + [(f"source {i}", s) for i, s in enumerate(self.sources)]:
            if len(pos) != 3 or not all(0.0 < p < d for p, d in zip(pos, self.dimensions)):
                raise GeometryError(f"{name} at {pos} is not strictly inside the room {self.dimensions}")
        if len(self.reflection) != 6 or not all(0.0 <= b < 1.0 for b in self.reflection):
            raise GeometryError(f"need six reflection coefficients in [0, 1), got {self.reflection}")
        if self.max_order < 0:
            raise ConfigError("max_order must be >= 0")
        if self.speed_of_sound <= 0 or self.sample_rate <= 0:
            raise ConfigError("speed of sound and sample rate must be positive")


def _images(room: RoomSpec, source_index: int):
    """Distances and amplitudes of all image sources up to ``room.max_order`` reflections."""
    src = np.asarray(room.sources[source_index])
    dims = np.asarray(room.dimensions)
    mic = np.asarray(room.mic)
    order = room.max_order
    span = order // 2 + 1
    n = np.arange(-span, span + 1)
    q = np.array([0, 1])
    # per axis: image coordinate, reflection count on the low wall and on the high wall
    axes = []
    for ax in range(3):
        nn, qq = np.meshgrid(n, q, indexing="ij")
        nn, qq = nn.ravel(), qq.ravel()
        coord = (1 - 2 * qq) * src[ax] + 2 * nn * dims[ax]
        low, high = np.abs(nn - qq), np.abs(nn)
        axes.append((coord, low, high))
    (cx, lx, hx), (cy, ly, hy), (cz, lz, hz) = axes
    ix, iy, iz = np.meshgrid(np.arange(len(cx)), np.arange(len(cy)), np.arange(len(cz)), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    total = lx[ix] + hx[ix] + ly[iy] + hy[iy] + lz[iz] + hz[iz]
    keep = total <= order
    ix, iy, iz = ix[keep], iy[keep], iz[keep]
    pos = np.stack([cx[ix], cy[iy], cz[iz]], axis=1)
    dist = np.linalg.norm(pos - mic, axis=1)
    b = room.reflection
    gain = (np.power(b[0], lx[ix]) * np.power(b[1], hx[ix]) * np.power(b[2], ly[iy]) * np.power(b[3], hy[iy])
            * np.power(b[4], lz[iz]) * np.power(b[5], hz[iz]))
    order_of = total[keep]
    # stable order: by arrival, then reflection count, so accumulation is reproducible
    idx = np.lexsort((order_of, dist))
    return dist[idx], gain[idx], order_of[idx]


def image_list(room: RoomSpec, source_index: int = 0):
    """(distance, amplitude factor, order) for every image; the direct path has order 0."""
    return _images(room, source_index)


def simulate_rir(room: RoomSpec, source_index: int = 0) -> np.ndarray:
    """Image-source RIR from ``room.sources[source_index]`` to the mic.

    Each image contributes ``gain / (4 pi d)`` at delay ``d fs / c``: rounded to the
    nearest sample by default, or a Hann-windowed sinc when ``room.fractional``.
    Images of zero amplitude are skipped.
    """
    if not 0 <= source_index < len(room.sources):
        raise GeometryError(f"source index {source_index} out of range for {len(room.sources)} sources")
    dist, gain, _ = _images(room, source_index)
    if dist[0] < 1e-9:
        raise GeometryError(f"source {source_index} coincides with the microphone")
    amp = gain / (4.0 * np.pi * dist)
    delay = dist * room.sample_rate / room.speed_of_sound
    nz = amp != 0.0
    amp, delay = amp[nz], delay[nz]
    pad = SINC_HALF_WIDTH if room.fractional else 0
    length = room.rir_length or int(math.ceil(delay.max())) + 1 + pad
    rir = np.zeros(length)
    if not room.fractional:
        taps = np.rint(delay).astype(np.int64)
        ok = taps < length
        np.add.at(rir, taps[ok], amp[ok])
        return rir
    offsets = np.arange(-SINC_HALF_WIDTH, SINC_HALF_WIDTH + 1)
    window = 0.5 * (1 + np.cos(np.pi * offsets / (SINC_HALF_WIDTH + 1)))
    for a, d in zip(amp, delay):
        centre = int(np.floor(d))
        idx = centre + offsets
        ok = (idx >= 0) & (idx < length)
        if not ok.any():
            continue
        kernel = np.sinc(idx - d) * window
        rir[idx[ok]] += a * kernel[ok]
    return rir


def direct_delay(room: RoomSpec, source_index: int = 0) -> int:
    src = np.asarray(room.sources[source_index])
    d = float(np.linalg.norm(src - np.asarray(room.mic)))
    return int(round(d * room.sample_rate / room.speed_of_sound))


def early_target(rir, sample_rate: int = 16000, window_s: float = EARLY_WINDOW_S,
                 fade_s: float = EARLY_FADE_S) -> np.ndarray:
    """Keep the RIR up to the direct-path peak plus ``window_s``; a raised-cosine fade of
    ``fade_s`` follows the boundary and everything after it is zeroed."""
    h = np.asarray(rir, dtype=np.float64)
    if h.ndim != 1 or not np.any(h):
        raise InputError("early_target needs a non-zero 1-D RIR")
    peak = int(np.argmax(np.abs(h)))
    boundary = peak + int(round(window_s * sample_rate))
    fade = int(round(fade_s * sample_rate))
    out = h.copy()
    if boundary >= len(h):
        return out
    ramp = 0.5 * (1.0 + np.cos(np.pi * np.arange(1, fade + 1) / (fade + 1)))
    end = min(len(h), boundary + fade)
    out[boundary:end] *= ramp[: end - boundary]
    out[end:] = 0.0
    return out


def direct_path_rir(room: RoomSpec, source_index: int = 0, length: int | None = None) -> np.ndarray:
    """Anechoic target filter: the order-0 (direct sound) part of the RIR."""
    return simulate_rir(replace(room, max_order=0, rir_length=length), source_index)


@dataclass(frozen=True)
class MixtureSpec:
    num_sources: int = 2
    level_offsets_db: tuple | None = None  # per source, relative to unit active level
    snr_db: float | None = 5.0  # None: no noise track
    seed: int = 0
    duration: float = 10.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.num_sources < 1:
            raise ConfigError(f"need at least one source, got R={self.num_sources}")
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        offs = self.level_offsets_db
        offs = (0.0,) * self.num_sources if offs is None else tuple(float(o) for o in offs)
        if len(offs) != self.num_sources:
            raise ConfigError(f"{len(offs)} level offsets for {self.num_sources} sources")
        object.__setattr__(self, "level_offsets_db", offs)

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class MixtureBundle:
    mixture: np.ndarray
    reverberant: np.ndarray  # (R, L) s_r * h_r
    early: np.ndarray  # (R, L) early-reflection targets
    anechoic: np.ndarray  # (R, L) direct-path targets
    noise: np.ndarray
    rirs: list
    manifest: dict = field(default_factory=dict)

    def identity_error(self) -> float:
        """Relative error of y = noise + sum_r s_r * h_r, recomputed from the tracks."""
        ref = self.noise + self.reverberant.sum(axis=0)
        scale = max(np.max(np.abs(self.mixture)), 1e-300)
        return float(np.max(np.abs(self.mixture - ref)) / scale)


def _crop(signal, n, rng, what):
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"{what} must be mono 1-D audio")
    if len(x) < n:
        raise InputError(f"{what} has {len(x)} samples but {n} are needed")
    start = int(rng.integers(0, len(x) - n + 1))
    return x[start:start + n], start


def synthesize_mixture(spec: MixtureSpec, room: RoomSpec, speech, noise=None) -> MixtureBundle:
    """Build y = noise + sum_r s_r * h_r from ``spec.num_sources`` speech signals.

    Each source is cropped at a seeded offset, scaled to unit active level plus its
    offset, and convolved (float64) with its RIR from ``room``. The noise is scaled
    so the active-level SNR of summed reverberant speech against noise is ``snr_db``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_samples
    if len(speech) != spec.num_sources:
        raise ConfigError(f"{len(speech)} speech signals for R={spec.num_sources}")
    if len(room.sources) < spec.num_sources:
        raise ConfigError(f"room has {len(room.sources)} sources but R={spec.num_sources}")
    if room.sample_rate != spec.sample_rate:
        raise ConfigError("room and mixture sample rates differ")
    dry, rirs, rev, early, anech, src_meta = [], [], [], [], [], []
    for r in range(spec.num_sources):
        crop, start = _crop(speech[r], n, rng, f"speech source {r}")
        level = active_rms(crop)
        if level == 0.0:
            raise InputError(f"speech source {r} is silent")
        gain = 10.0 ** (spec.level_offsets_db[r] / 20.0) / level
        s = crop * gain
        h = simulate_rir(room, r)
        dry.append(s)
        rirs.append(h)
        rev.append(fftconvolve(s, h)[:n])
        early.append(fftconvolve(s, early_target(h, spec.sample_rate))[:n])
        anech.append(fftconvolve(s, direct_path_rir(room, r, len(h)))[:n])
        src_meta.append({"offset": start, "gain": gain, "level_offset_db": spec.level_offsets_db[r],
                         "direct_delay": direct_delay(room, r), "rir_length": len(h),
                         "rir_peak": int(np.argmax(np.abs(h)))})
    rev = np.stack(rev)
    speech_sum = rev.sum(axis=0)
    noise_meta = None
    if spec.snr_db is None:
        eta = np.zeros(n)
    else:
        if noise is None:
            raise ConfigError("snr_db is set but no noise signal was given")
        crop, start = _crop(noise, n, rng, "noise")
        noise_level = active_rms(crop)
        if noise_level == 0.0:
            raise ConfigError("SNR is unreachable with an all-zero noise signal")
        speech_level = active_rms(speech_sum)
        if speech_level == 0.0:
            raise InputError("reverberant speech is silent")
        ngain = speech_level / noise_level * 10.0 ** (-spec.snr_db / 20.0)
        eta = crop * ngain
        noise_meta = {"offset": start, "gain": ngain}
    mixture = eta + speech_sum
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "mixture": asdict(spec),
        "room": asdict(room),
        "sources": src_meta,
        "noise": noise_meta,
        "snr_definition": "active-level RMS of summed reverberant speech over active-level RMS of noise",
        "early_window_s": EARLY_WINDOW_S,
        "early_fade_s": EARLY_FADE_S,
    }
    return MixtureBundle(mixture, rev, np.stack(early), np.stack(anech), eta, rirs, manifest)


def measured_snr(bundle: MixtureBundle) -> float:
    return 20.0 * np.log10(active_rms(bundle.reverberant.sum(axis=0)) / active_rms(bundle.noise))


def random_room(seed: int, num_sources: int = 2, sample_rate: int = 16000, max_order: int = 8,
                margin: float = 0.5, min_distance: float = 0.5, fractional: bool = False) -> RoomSpec:
    """Room with dimensions in [3, 30] m and reflection coefficients in [0, 0.92]."""
    rng = np.random.default_rng(seed)
    dims = rng.uniform(*DIM_RANGE, size=3)
    refl = rng.uniform(*COEF_RANGE, size=6)
    mic = rng.uniform(margin, dims - margin)
    sources = []
    while len(sources) < num_sources:
        pos = rng.uniform(margin, dims - margin)
        if np.linalg.norm(pos - mic) >= min_distance:
            sources.append(tuple(pos))
    return RoomSpec(tuple(dims), tuple(sources), tuple(mic), tuple(refl), max_order,
                    sample_rate=sample_rate, fractional=fractional)


def synthetic_source(seed: int, num_samples: int, sample_rate: int = 16000) -> np.ndarray:
    """Speech-like stand-in: harmonic voiced segments with a gliding pitch separated by pauses."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_samples) / sample_rate
    f0 = rng.uniform(90, 250) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voiced = sum(np.sin(k * phase) / k for k in range(1, 16) if k * f0.max() < sample_rate / 2)
    env = np.zeros(num_samples)
    pos = 0
    while pos < num_samples:
        seg = int(rng.uniform(0.15, 0.6) * sample_rate)
        gap = int(rng.uniform(0.05, 0.3) * sample_rate)
        end = min(num_samples, pos + seg)
        env[pos:end] = np.hanning(seg)[: end - pos] * rng.uniform(0.3, 1.0)
        pos = end + gap
    return voiced * env + 1e-3 * rng.standard_normal(num_samples) * env


def synthetic_noise(seed: int, num_samples: int, sample_rate: int = 16000) -> np.ndarray:
    """Pink-ish stationary noise."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(num_samples)
    return lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                   [1, -2.494956002, 2.017265875, -0.522189400], white)


# ---- augmentation ----

AUGMENTATIONS = ("gain", "biquad", "silence")
BIQUAD_KINDS = ("lowpass", "highpass", "peaking", "lowshelf", "highshelf")


def _draw(rng, value):
    """Scalars pass through; a [lo, hi] pair is sampled uniformly."""
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ConfigError(f"ranges must be [lo, hi], got {value}")
        return float(rng.uniform(value[0], value[1]))
    return float(value)


def biquad_coefficients(kind: str, freq: float, q: float, gain_db: float, sample_rate: int):
    """Audio EQ cookbook (RBJ) biquad; returns normalized (b, a)."""
    if kind not in BIQUAD_KINDS:
        raise ConfigError(f"unsupported biquad kind {kind!r}; choose from {BIQUAD_KINDS}")
    if not 0 < freq < sample_rate / 2 or q <= 0:
        raise ConfigError(f"biquad needs 0 < freq < fs/2 and q > 0, got freq={freq}, q={q}")
    w0 = 2 * np.pi * freq / sample_rate
    cw, sw = np.cos(w0), np.sin(w0)
    alpha = sw / (2 * q)
    amp = 10.0 ** (gain_db / 40.0)
    if kind == "lowpass":
        b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
        a = [1 + alpha, -2 * cw, 1 - alpha]
    elif kind == "highpass":
        b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
        a = [1 + alpha, -2 * cw, 1 - alpha]
    elif kind == "peaking":
        b = [1 + alpha * amp, -2 * cw, 1 - alpha * amp]
        a = [1 + alpha / amp, -2 * cw, 1 - alpha / amp]
    else:
        sq = 2 * np.sqrt(amp) * alpha
        sign = 1 if kind == "lowshelf" else -1
        b = [amp * ((amp + 1) - sign * (amp - 1) * cw + sq),
             sign * 2 * amp * ((amp - 1) - sign * (amp + 1) * cw),
             amp * ((amp + 1) - sign * (amp - 1) * cw - sq)]
        a = [(amp + 1) + sign * (amp - 1) * cw + sq,
             -sign * 2 * ((amp - 1) + sign * (amp + 1) * cw),
             (amp + 1) + sign * (amp - 1) * cw - sq]
    b, a = np.asarray(b), np.asarray(a)
    return b / a[0], a / a[0]


def augment(signal, recipe, seed: int, sample_rate: int = 16000):
    """Apply ``recipe`` (a list of dicts with a ``type`` key) in order.

    Supported items:
      {"type": "gain", "db": x}
      {"type": "biquad", "kind": ..., "freq": hz, "q": x, "gain_db": x}
      {"type": "silence", "count": n, "min_ms": x, "max_ms": y}
    Numeric fields may be [lo, hi] ranges drawn from the seeded generator.
    Returns ``(signal, applied)`` where ``applied`` lists the resolved parameters.
    """
    rng = np.random.default_rng(seed)
    x = np.array(signal, dtype=np.float64)
    applied = []
    for item in recipe:
        kind = item.get("type")
        if kind not in AUGMENTATIONS:
            raise ConfigError(f"unsupported augmentation {kind!r}; supported: {AUGMENTATIONS}")
        if kind == "gain":
            db = _draw(rng, item.get("db", 0.0))
            x = x * 10.0 ** (db / 20.0)
            applied.append({"type": "gain", "db": db})
        elif kind == "biquad":
            k = item.get("kind", "peaking")
            freq = _draw(rng, item.get("freq", 1000.0))
            q = _draw(rng, item.get("q", 0.707))
            gdb = _draw(rng, item.get("gain_db", 0.0))
            b, a = biquad_coefficients(k, freq, q, gdb, sample_rate)
            x = lfilter(b, a, x)
            applied.append({"type": "biquad", "kind": k, "freq": freq, "q": q, "gain_db": gdb})
        else:
            count = int(item.get("count", 1))
            fade = int(round(SILENCE_FADE_S * sample_rate))
            regions = []
            for _ in range(count):
                dur = int(round(_draw(rng, [item.get("min_ms", 100.0), item.get("max_ms", 500.0)])
                                * sample_rate / 1000.0))
                dur = min(dur, len(x))
                start = int(rng.integers(0, len(x) - dur + 1))
                x = _silence(x, start, dur, fade)
                regions.append([start, dur])
            applied.append({"type": "silence", "regions": regions, "fade_ms": SILENCE_FADE_S * 1000})
    return x, applied


def _silence(x, start, dur, fade):
    """Zero ``[start, start+dur)`` with raised-cosine fades of ``fade`` samples on both sides."""
    out = x.copy()
    out[start:start + dur] = 0.0
    ramp = 0.5 * (1.0 + np.cos(np.pi * np.arange(1, fade + 1) / (fade + 1)))  # 1 -> 0
    lo = max(0, start - fade)
    out[lo:start] *= ramp[fade - (start - lo):]
    hi = min(len(x), start + dur + fade)
    out[start + dur:hi] *= ramp[::-1][: hi - start - dur]
    return out


def write_bundle(bundle: MixtureBundle, directory, sample_rate: int = 16000, subtype: str = "float32") -> Path:
    """WAV tracks plus manifest.json. Float WAVs hold float32, so reloaded tracks only
    satisfy the mixture identity to float32 precision."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = {"mixture": "mixture.wav", "noise": "noise.wav"}
    write_wav(out / "mixture.wav", bundle.mixture, sample_rate, subtype)
    write_wav(out / "noise.wav", bundle.noise, sample_rate, subtype)
    for r in range(len(bundle.reverberant)):
        for name, track in (("reverberant", bundle.reverberant), ("early", bundle.early),
                            ("anechoic", bundle.anechoic)):
            fname = f"s{r}.{name}.wav"
            write_wav(out / fname, track[r], sample_rate, subtype)
            files[f"s{r}.{name}"] = fname
        fname = f"rir{r}.wav"
        write_wav(out / fname, bundle.rirs[r], sample_rate, "float32")
        files[f"rir{r}"] = fname
    manifest = dict(bundle.manifest)
    manifest["files"] = files
    manifest["wav_subtype"] = subtype
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return out
