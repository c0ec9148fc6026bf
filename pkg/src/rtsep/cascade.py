"""NS -> SS -> DR cascade in the STFT domain, plus the single-stage E2E alternative.

Stages pass spectra to each other, never resynthesized audio, so the whole cascade has
the latency of one STFT analysis/synthesis pair no matter how many stages run. Every
inter-stage spectrum is snapped to :data:`rtsep.spectral.SPECTRAL_QUANTUM`; on that grid
the subtractive bookkeeping ``X1 + X2 == X`` holds exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from rtsep.errors import ConfigError, SizeError
from rtsep.network import config as netcfg
from rtsep.network.config import ModelConfig
from rtsep.network.macs import layer_macs
from rtsep.network.model import Model, identity_params, random_params
from rtsep.network.weights import load_weights
from rtsep.spectral import (
    DEFAULT_STFT,
    AnalysisState,
    SpectrumHistory,
    StftConfig,
    SynthesisState,
    apply_ctf,
    compress_features,
    istft,
    lag_stack,
    pad_to_hop,
    snap,
    stft,
)

STAGE_KINDS = ("NS", "SS", "DR", "E2E")
MODES = ("multi", "subtractive", "e2e")
DEFAULT_STOP_DB = -30.0


@dataclass(frozen=True)
class StageSpec:
    kind: str
    config: ModelConfig
    weights: str | None = None  # path, "identity", or None for seeded random


@dataclass(frozen=True)
class CascadeConfig:
    stages: tuple
    mode: str = "subtractive"
    num_sources: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    @property
    def e2e(self) -> bool:
        return self.mode == "e2e"

    def stage(self, kind):
        for spec in self.stages:
            if spec.kind == kind:
                return spec
        return None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_sources < 2:
            raise ConfigError(f"num_sources R must be >= 2, got {self.num_sources}")
        kinds = [s.kind for s in self.stages]
        if any(k not in STAGE_KINDS for k in kinds):
            raise ConfigError(f"unknown stage kind in {kinds}")
        if self.e2e:
            if kinds != ["E2E"]:
                raise ConfigError(f"e2e mode takes exactly one E2E stage, got {kinds}")
            if self.stages[0].config.decoders != self.num_sources:
                raise ConfigError(f"E2E model needs D = R = {self.num_sources} decoders, "
                                  f"got {self.stages[0].config.decoders}")
            return
        if kinds.count("SS") != 1 or "E2E" in kinds or len(set(kinds)) != len(kinds):
            raise ConfigError(f"cascade needs exactly one SS stage and at most one NS and DR, got {kinds}")
        order = [k for k in ("NS", "SS", "DR") if k in kinds]
        if kinds != order:
            raise ConfigError(f"stages must run in NS, SS, DR order, got {kinds}")
        ss = self.stage("SS").config
        if self.mode == "multi" and ss.decoders != self.num_sources:
            raise ConfigError(f"multi-decoder separation needs SS decoders D = R = {self.num_sources}, "
                              f"got {ss.decoders}")
        if self.mode == "subtractive" and ss.decoders != 1:
            raise ConfigError(f"subtractive separation needs SS decoders D = 1, got {ss.decoders}")
        for kind in ("NS", "DR"):
            spec = self.stage(kind)
            if spec is not None and spec.config.decoders != 1:
                raise ConfigError(f"{kind} stage needs D = 1, got {spec.config.decoders}")

    def with_weights(self, weights) -> "CascadeConfig":
        """Return a copy with every stage's weight source replaced by ``weights``."""
        return replace(self, stages=tuple(replace(s, weights=weights) for s in self.stages))


def cascade_preset(name: str, num_sources: int = 2) -> CascadeConfig:
    key = name.lower()
    if key in ("cassub", "subtractive"):
        stages = (StageSpec("NS", netcfg.NS), StageSpec("SS", netcfg.SS_SUB), StageSpec("DR", netcfg.DR))
        return CascadeConfig(stages, "subtractive", num_sources)
    if key in ("cas", "multi"):
        ss = netcfg.SS.with_decoders(num_sources)
        stages = (StageSpec("NS", netcfg.NS), StageSpec("SS", ss), StageSpec("DR", netcfg.DR))
        return CascadeConfig(stages, "multi", num_sources)
    if key == "e2e":
        return CascadeConfig((StageSpec("E2E", netcfg.E2E.with_decoders(num_sources)),), "e2e", num_sources)
    raise ConfigError(f"unknown cascade preset {name!r}; choose from Cas, CasSUB, E2E")


_DEFAULT_STAGE_PRESET = {"NS": "NS", "SS": "SS", "DR": "DR", "E2E": "E2E"}


def load_cascade_config(path) -> CascadeConfig:
    """Read an INI cascade description (see README for the layout)."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        if not parser.read(path):
            raise ConfigError(f"{path}: cannot read config file")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "cascade" not in parser:
        raise ConfigError(f"{path}: missing [cascade] section")
    top = parser["cascade"]
    mode = top.get("mode", "subtractive")
    try:
        num_sources = int(top.get("sources", "2"))
        seed = int(top.get("seed", "0"))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    kinds = [k.strip().upper() for k in top.get("stages", "E2E" if mode == "e2e" else "NS, SS, DR").split(",")]
    stages = []
    for kind in kinds:
        section = dict(parser[kind]) if kind in parser else {}
        base_name = section.pop("preset", _DEFAULT_STAGE_PRESET.get(kind, kind))
        weights = section.pop("weights", None)
        if weights and weights not in ("identity", "random") and not Path(weights).is_absolute():
            weights = str(path.parent / weights)
        if weights == "random":
            weights = None
        base = {k: netcfg._fmt(v) for k, v in asdict(netcfg.preset(base_name)).items()}
        if kind in ("SS", "E2E") and "decoders" not in section:
            if mode == "multi" or kind == "E2E":
                base["decoders"] = str(num_sources)
            elif mode == "subtractive":
                base["decoders"] = "1"
        base["rnn_hidden"] = "auto"
        base.update(section)
        stages.append(StageSpec(kind, netcfg.from_mapping(base), weights))
    return CascadeConfig(tuple(stages), mode, num_sources, seed)


def dump_cascade_config(cfg: CascadeConfig) -> str:
    lines = ["[cascade]", f"mode = {cfg.mode}", f"sources = {cfg.num_sources}",
             f"stages = {', '.join(s.kind for s in cfg.stages)}", f"seed = {cfg.seed}", ""]
    for spec in cfg.stages:
        lines.append(f"[{spec.kind}]")
        if spec.weights:
            lines.append(f"weights = {spec.weights}")
        lines.extend(netcfg.to_text(spec.config).splitlines())
        lines.append("")
    return "\n".join(lines)


class Cascade:
    """Built models for every stage; immutable and shareable between sessions."""

    def __init__(self, config: CascadeConfig, models: dict, stft_config: StftConfig = DEFAULT_STFT):
        self.config = config
        self.models = models
        self.stft = stft_config
        for kind, model in models.items():
            if model.config.input_bins != stft_config.bins:
                raise ConfigError(f"{kind} model expects {model.config.input_bins} bins, STFT gives {stft_config.bins}")

    @classmethod
    def build(cls, config: CascadeConfig, dtype=np.float32, stft_config: StftConfig = DEFAULT_STFT) -> "Cascade":
        models = {}
        for index, spec in enumerate(config.stages):
            if spec.weights == "identity":
                params = identity_params(spec.config)
            elif spec.weights:
                params = load_weights(spec.weights, spec.config).tensors
            else:
                params = random_params(spec.config, seed=config.seed + index)
            models[spec.kind] = Model(spec.config, params, dtype=dtype)
        return cls(config, models, stft_config)

    @property
    def num_sources(self) -> int:
        return self.config.num_sources

    def session(self) -> "StreamSession":
        return StreamSession(self)


def _stage_step(model: Model, state, history: SpectrumHistory, spectra) -> np.ndarray:
    """One frame of one stage on a batch of spectra ``(B, K)`` -> ``(B, D, K)``."""
    feats = compress_features(spectra, model.config.feature_compression)
    taps = model.step(state, feats)
    frames = history.push(spectra)  # (B, T, K)
    return snap(apply_ctf(frames[:, None], taps))


def _stage_offline(model: Model, spectra) -> np.ndarray:
    """Whole-utterance stage pass on ``(B, N, K)`` spectra -> ``(B, D, N, K)``."""
    feats = compress_features(spectra, model.config.feature_compression)
    taps = model.forward(feats)  # (B, N, D, K, T, F)
    hist = lag_stack(spectra, model.config.ctf_taps[0])  # (B, N, T, K)
    out = apply_ctf(hist[:, :, None], taps)  # (B, N, D, K)
    return snap(np.moveaxis(out, 2, 1))


class StreamSession:
    """Per-stream state: analysis front end, per-stage model states and CTF histories,
    per-branch synthesis. One hop in, one hop per branch out."""

    def __init__(self, cascade: Cascade):
        self.cascade = cascade
        cfg = cascade.config
        r = cfg.num_sources
        bins = cascade.stft.bins
        self.analysis = AnalysisState(cascade.stft)
        self.synthesis = [SynthesisState(cascade.stft) for _ in range(r)]
        self.states, self.histories = {}, {}
        for kind, model in cascade.models.items():
            t_taps = model.config.ctf_taps[0]
            if kind == "DR":
                self.states[kind] = [model.new_state(batch=r)]
                self.histories[kind] = [SpectrumHistory(t_taps, bins, (r,))]
            elif kind == "SS" and cfg.mode == "subtractive":
                # one recursion level per extracted source, each with its own state
                self.states[kind] = [model.new_state() for _ in range(r - 1)]
                self.histories[kind] = [SpectrumHistory(t_taps, bins, (1,)) for _ in range(r - 1)]
            else:
                self.states[kind] = [model.new_state()]
                self.histories[kind] = [SpectrumHistory(t_taps, bins, (1,))]
        self.frames = 0
        self.trace = None

    @property
    def delay(self) -> int:
        return self.cascade.stft.delay

    @property
    def latency(self) -> int:
        return self.cascade.stft.latency

    def reset(self):
        self.analysis.reset()
        for s in self.synthesis:
            s.reset()
        for states in self.states.values():
            for st in states:
                st.reset()
        for hists in self.histories.values():
            for h in hists:
                h.reset()
        self.frames = 0

    def process_spectrum(self, y) -> np.ndarray:
        """Run all stages on one input spectrum; returns branch spectra ``(R, K)``."""
        models = self.cascade.models
        cfg = self.cascade.config
        r = cfg.num_sources
        x = snap(y)[None]
        record = {"input": x[0]} if self.trace is not None else None
        if cfg.e2e:
            out = _stage_step(models["E2E"], self.states["E2E"][0], self.histories["E2E"][0], x)[0]
        else:
            if "NS" in models:
                x = _stage_step(models["NS"], self.states["NS"][0], self.histories["NS"][0], x)[:, 0]
            if record is not None:
                record["ns"] = x[0]
            ss = models["SS"]
            if cfg.mode == "multi":
                out = _stage_step(ss, self.states["SS"][0], self.histories["SS"][0], x)[0]
            else:
                branches, residual = [], x
                for state, hist in zip(self.states["SS"], self.histories["SS"]):
                    est = _stage_step(ss, state, hist, residual)[:, 0]
                    branches.append(est[0])
                    residual = residual - est
                branches.append(residual[0])
                out = np.stack(branches)
            if record is not None:
                record["ss"] = out
            if "DR" in models:
                out = _stage_step(models["DR"], self.states["DR"][0], self.histories["DR"][0], out)[:, 0]
        if record is not None:
            record["output"] = out
            self.trace.append(record)
        assert out.shape[0] == r
        return out

    def process_frame(self, samples) -> np.ndarray:
        """One hop of input samples -> ``(R, hop)`` output samples."""
        y = self.analysis.push(samples)
        spectra = self.process_spectrum(y)
        self.frames += 1
        return np.stack([syn.push(s) for syn, s in zip(self.synthesis, spectra)])


def process_stream(session: StreamSession, signal) -> np.ndarray:
    """Feed a whole signal hop by hop; returns ``(R, len(signal))`` delayed outputs."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise SizeError(f"expected a mono signal, got shape {signal.shape}")
    hop = session.cascade.stft.hop
    padded = pad_to_hop(signal, hop)
    out = np.empty((session.cascade.num_sources, len(padded)))
    for start in range(0, len(padded), hop):
        out[:, start: start + hop] = session.process_frame(padded[start: start + hop])
    return out[:, : len(signal)]


def process_offline_spectra(cascade: Cascade, y) -> dict:
    """Whole-utterance reference pass on an input spectrogram ``(N, K)``.

    Returns the intermediate and final spectrograms: ``ns`` (N, K), ``ss`` and
    ``output`` (R, N, K).
    """
    models = cascade.models
    cfg = cascade.config
    x = snap(y)[None]
    result = {"input": x[0]}
    if cfg.e2e:
        out = _stage_offline(models["E2E"], x)[0]
    else:
        if "NS" in models:
            x = _stage_offline(models["NS"], x)[:, 0]
        result["ns"] = x[0]
        ss = models["SS"]
        if cfg.mode == "multi":
            out = _stage_offline(ss, x)[0]
        else:
            branches, residual = [], x
            for _ in range(cfg.num_sources - 1):
                est = _stage_offline(ss, residual)[:, 0]
                branches.append(est[0])
                residual = residual - est
            branches.append(residual[0])
            out = np.stack(branches)
        result["ss"] = out
        if "DR" in models:
            out = _stage_offline(models["DR"], out)[:, 0]
    result["output"] = out
    return result


def process_offline(cascade: Cascade, signal) -> np.ndarray:
    """Whole-file reference processing with the same alignment as :func:`process_stream`."""
    signal = np.asarray(signal, dtype=np.float64)
    y = stft(signal, cascade.stft)
    out = process_offline_spectra(cascade, y)["output"]
    return np.stack([istft(s, cascade.stft)[: len(signal)] for s in out])


def _check_single_decoder(ss_model: Model):
    if ss_model.config.decoders != 1:
        raise ConfigError(f"subtractive separation needs a single-decoder model, got D = {ss_model.config.decoders}")


def separate_subtractive(ss_model: Model, state, history: SpectrumHistory):
    """Extract one source from the current frame and return ``(X1, X - X1)``.

    ``history`` must already hold the current SS input at lag 0. ``X1`` is snapped to the
    spectral grid, so ``X1 + X2 == X`` exactly whenever ``X`` is on the grid.
    """
    _check_single_decoder(ss_model)
    frames = np.asarray(history.frames if isinstance(history, SpectrumHistory) else history)
    x = frames[..., 0, :].reshape(1, -1)
    taps = ss_model.step(state, compress_features(x, ss_model.config.feature_compression))
    x1 = snap(apply_ctf(frames.reshape((1,) + frames.shape[-2:]), taps[:, 0]))[0]
    return x1, x[0] - x1


def separate_multi(ss_model: Model, state, history: SpectrumHistory, num_sources: int | None = None):
    """All ``D`` decoders filter the same input frame; returns ``D`` spectra."""
    d = ss_model.config.decoders
    if num_sources is not None and d != num_sources:
        raise ConfigError(f"multi-decoder separation needs D = R, got D = {d}, R = {num_sources}")
    frames = np.asarray(history.frames if isinstance(history, SpectrumHistory) else history)
    frames = frames.reshape((1,) + frames.shape[-2:])
    taps = ss_model.step(state, compress_features(frames[:, 0], ss_model.config.feature_compression))
    return list(snap(apply_ctf(frames[:, None], taps))[0])


def separate_recursive(ss_model: Model, spectrum, max_sources: int, stop_threshold_db: float = DEFAULT_STOP_DB):
    """Recursive subtractive separation of a whole utterance ``(N, K)``.

    Each level runs the single-decoder model from a fresh state on the current residual
    and subtracts its estimate. Recursion stops once the residual energy is
    ``stop_threshold_db`` below the input energy, or when ``max_sources - 1`` sources
    have been extracted. The final residual is returned as the last source, so the
    returned spectra always sum to the (grid-snapped) input.
    """
    _check_single_decoder(ss_model)
    if max_sources < 2:
        raise ConfigError(f"max_sources must be >= 2, got {max_sources}")
    x = snap(spectrum)
    total = float(np.sum(np.abs(x) ** 2))
    limit = total * 10.0 ** (stop_threshold_db / 10.0)
    sources, residual = [], x
    for _ in range(max_sources - 1):
        if float(np.sum(np.abs(residual) ** 2)) <= limit:
            break
        est = _stage_offline(ss_model, residual[None])[0, 0]
        sources.append(est)
        residual = residual - est
    sources.append(residual)
    return sources


def two_pass(session: StreamSession, signal) -> np.ndarray:
    """Warm-up protocol: stream ``signal`` once to converge every buffer and state, then
    stream it again on the same session and return only the second pass."""
    process_stream(session, signal)
    return process_stream(session, signal)


def stage_multiplicity(config: CascadeConfig, kind: str) -> int:
    """How many times a stage's model runs per hop."""
    if kind == "DR":
        return config.num_sources
    if kind == "SS" and config.mode == "subtractive":
        return config.num_sources - 1
    return 1


def cascade_macs(config: CascadeConfig) -> list:
    """Per-stage ``(kind, runs_per_hop, macs_per_run, layer_rows)``; total = sum of runs x macs."""
    rows = []
    for spec in config.stages:
        layers = layer_macs(spec.config)
        rows.append((spec.kind, stage_multiplicity(config, spec.kind), sum(m for _, m in layers), layers))
    return rows


def total_macs(config: CascadeConfig) -> int:
    return sum(n * m for _, n, m, _ in cascade_macs(config))
