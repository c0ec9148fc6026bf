"""Command-line front end: separate, eval, synth, macs, inspect-weights.

Exit codes: 0 success, 2 usage error, 3 input or format error, 4 config or weight
incompatibility. ``SEP_RT_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from rtsep import datagen
from rtsep.audio_io import SAMPLE_RATE, WavWriter, open_wav, read_wav
from rtsep.cascade import (
    Cascade,
    CascadeConfig,
    cascade_macs,
    cascade_preset,
    load_cascade_config,
    process_stream,
)
from rtsep.errors import ConfigError, InputError, RtsepError, UsageError
from rtsep.metrics import evaluate_pair
from rtsep.network.weights import load_weights, read_bundle
from rtsep.objectives import LossConfig
from rtsep.spectral import SynthesisState

log = logging.getLogger("rtsep")

MODE_PRESETS = {"subtractive": "CasSUB", "multi": "Cas", "e2e": "E2E"}
MANIFEST_VERSION = 1
BLOCK_HOPS = 100  # hops read from disk per block while streaming


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_cascade_args(p):
    p.add_argument("--config", help="INI cascade config (overrides --preset)")
    p.add_argument("--preset", choices=["CasSUB", "Cas", "E2E"], help="built-in cascade (default follows --mode)")
    p.add_argument("--mode", choices=["multi", "subtractive", "e2e"])
    p.add_argument("--sources", type=int, help="number of output sources R (default 2)")
    p.add_argument("--seed", type=int, help="seed for randomly initialized stages")


def _add_weight_arg(p):
    p.add_argument("--weights", default="random",
                   help="'identity', 'random', a directory of <STAGE>.crwb files, or one .crwb for a single stage")


def resolve_cascade(args) -> CascadeConfig:
    if args.config:
        cfg = load_cascade_config(args.config)
        if args.mode and args.mode != cfg.mode:
            raise ConfigError(f"--mode {args.mode} conflicts with mode = {cfg.mode} in {args.config}")
        if args.sources and args.sources != cfg.num_sources:
            raise ConfigError(f"--sources {args.sources} conflicts with sources = {cfg.num_sources} in {args.config}")
    else:
        name = args.preset or MODE_PRESETS[args.mode or "subtractive"]
        if args.mode and MODE_PRESETS[args.mode] != name:
            raise ConfigError(f"--mode {args.mode} conflicts with --preset {name}")
        cfg = cascade_preset(name, args.sources or 2)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    weights = getattr(args, "weights", None)
    if weights in (None, "random"):
        if args.config:
            return cfg
        return cfg.with_weights(None)
    if weights == "identity":
        return cfg.with_weights("identity")
    path = Path(weights)
    if path.is_dir():
        stages = []
        for spec in cfg.stages:
            f = path / f"{spec.kind}.crwb"
            if not f.is_file():
                raise InputError(f"{f}: weight file for stage {spec.kind} not found")
            stages.append(replace(spec, weights=str(f)))
        return replace(cfg, stages=tuple(stages))
    if path.is_file():
        if len(cfg.stages) != 1:
            raise UsageError("a single weight file only fits a one-stage (E2E) config; pass a directory instead")
        return cfg.with_weights(str(path))
    raise InputError(f"{path}: weights path does not exist")


# ---- separate ----

def separate_file(cascade: Cascade, path, out_dir, two_pass=False, keep_intermediate=False) -> dict:
    """Stream one file through ``cascade`` block by block and write ``<stem>.src<i>.wav``."""
    data, scale = open_wav(path)
    path = Path(path)
    out_dir = Path(out_dir)
    stft = cascade.stft
    hop = stft.hop
    r = cascade.num_sources
    n = len(data)
    session = cascade.session()
    passes = 2 if two_pass else 1
    outputs = [out_dir / f"{path.stem}.src{i}.wav" for i in range(r)]
    wall = 0.0
    for p in range(passes):
        last = p == passes - 1
        writers = [WavWriter(o, stft.sample_rate) for o in outputs] if last else []
        inter = {}
        if last and keep_intermediate and not cascade.config.e2e:
            session.trace = []
            inter = {"ns": (WavWriter(out_dir / f"{path.stem}.ns.wav", stft.sample_rate), SynthesisState(stft)),
                     "ss": [(WavWriter(out_dir / f"{path.stem}.ss{i}.wav", stft.sample_rate), SynthesisState(stft))
                            for i in range(r)]}
        start = time.perf_counter()
        for b0 in range(0, n, hop * BLOCK_HOPS):
            block = np.asarray(data[b0: b0 + hop * BLOCK_HOPS], dtype=np.float64) / scale
            out = process_stream(session, block)
            for w, o in zip(writers, out):
                w.write(o)
            if inter:
                _write_trace(session, inter, len(block), hop)
        if last:
            wall = time.perf_counter() - start
        session.trace = None
        for w in writers:
            w.close()
        for w, _ in ([inter["ns"]] + inter["ss"]) if inter else []:
            w.close()
    duration = n / stft.sample_rate
    return {
        "version": MANIFEST_VERSION,
        "input": str(path),
        "outputs": [str(o) for o in outputs],
        "sample_rate": stft.sample_rate,
        "mode": cascade.config.mode,
        "sources": r,
        "stages": {kind: f"{m.config.fingerprint():016x}" for kind, m in cascade.models.items()},
        "latency_samples": stft.latency,
        "latency_ms": 1000.0 * stft.latency / stft.sample_rate,
        "delay_samples": stft.delay,
        "frames": session.frames,
        "samples": n,
        "duration_s": duration,
        "two_pass": two_pass,
        "wall_s": wall,
        "real_time_factor": wall / duration if duration else 0.0,
    }


def _write_trace(session, inter, length, hop):
    """Synthesize the NS output and per-branch SS outputs recorded by the session trace."""
    records, session.trace = session.trace, []
    ns_w, ns_syn = inter["ns"]
    ns, ss = [], [[] for _ in inter["ss"]]
    for rec in records:
        ns.append(ns_syn.push(rec["ns"]))
        for i, (_, syn) in enumerate(inter["ss"]):
            ss[i].append(syn.push(rec["ss"][i]))
    ns_w.write(np.concatenate(ns)[:length])
    for (w, _), chunks in zip(inter["ss"], ss):
        w.write(np.concatenate(chunks)[:length])


def _separate_job(job):
    cfg, path, out, two, keep = job
    cascade = Cascade.build(cfg)
    return separate_file(cascade, path, out, two, keep)


def cmd_separate(args) -> int:
    cfg = resolve_cascade(args)
    out_dir = Path(args.out)
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:  # validate every input before any processing starts
        open_wav(p)
    if len({p.stem for p in inputs}) != len(inputs):
        raise UsageError("input files must have distinct names")
    out_dir.mkdir(parents=True, exist_ok=True)
    cascade = Cascade.build(cfg)  # loads and checks weights up front
    if args.workers > 1 and len(inputs) > 1:
        jobs = [(cfg, p, out_dir, args.two_pass, args.keep_intermediate) for p in inputs]
        with ProcessPoolExecutor(args.workers) as pool:
            manifests = list(pool.map(_separate_job, jobs))
    else:
        manifests = [separate_file(cascade, p, out_dir, args.two_pass, args.keep_intermediate) for p in inputs]
    for m in manifests:
        mpath = out_dir / f"{Path(m['input']).stem}.manifest.json"
        mpath.write_text(json.dumps(m, indent=2) + "\n")
        log.info("%s: %d frames, RTF %.3f", m["input"], m["frames"], m["real_time_factor"])
        if args.json:
            print(json.dumps(m))
        else:
            print(f"{m['input']}: {len(m['outputs'])} sources, latency {m['latency_ms']:.1f} ms, "
                  f"RTF {m['real_time_factor']:.3f}")
    return 0


# ---- eval ----

def cmd_eval(args) -> int:
    if len(args.targets) != len(args.estimates):
        raise UsageError(f"{len(args.targets)} target files but {len(args.estimates)} estimate files")
    r = args.sources or 2
    if len(args.targets) % r:
        raise UsageError(f"file lists must hold a multiple of R = {r} files")
    external = {}
    for item in args.external or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--external expects key=value, got {item!r}")
        try:
            external[key] = float(value)
        except ValueError:
            external[key] = value
    loss = LossConfig.from_db(threshold_db=args.threshold_db)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(0, len(args.targets), r):
            tg = np.stack([read_wav(p) for p in args.targets[i: i + r]])
            es = np.stack([read_wav(p) for p in args.estimates[i: i + r]])
            report = evaluate_pair(tg, es, loss, delay=args.delay, warmup=args.warmup, external=external)
            out.write(report.to_json(item=Path(args.estimates[i]).stem) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ---- synth ----

def _synth_job(job):
    seed, out, sources, snr, duration, speech, noise = job
    n = int(round(duration * SAMPLE_RATE))
    room = datagen.random_room(seed, sources)
    spec = datagen.MixtureSpec(sources, snr_db=snr, seed=seed, duration=duration)
    if speech:
        sigs = [read_wav(p) for p in speech[:sources]]
    else:
        sigs = [datagen.synthetic_source(seed * 1000 + r, n) for r in range(sources)]
    noise_sig = None
    if snr is not None:
        noise_sig = read_wav(noise) if noise else datagen.synthetic_noise(seed * 1000 + 999, n)
    bundle = datagen.synthesize_mixture(spec, room, sigs, noise_sig)
    if not speech:
        bundle.manifest["speech"] = "synthetic harmonic stand-in"
    target = Path(out) / f"mix{seed:06d}"
    datagen.write_bundle(bundle, target)
    return str(target)


def cmd_synth(args) -> int:
    if args.speech and len(args.speech) < (args.sources or 2):
        raise UsageError(f"need {args.sources or 2} speech files, got {len(args.speech)}")
    for p in (args.speech or []) + ([args.noise] if args.noise else []):
        open_wav(p)
    snr = None if args.snr is None or str(args.snr).lower() == "none" else float(args.snr)
    base = args.seed or 0
    jobs = [(base + i, args.out, args.sources or 2, snr, args.duration, args.speech, args.noise)
            for i in range(args.count)]
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            dirs = list(pool.map(_synth_job, jobs))
    else:
        dirs = [_synth_job(j) for j in jobs]
    for d in dirs:
        print(d)
    return 0


# ---- macs ----

def macs_table(cfg: CascadeConfig) -> dict:
    stages = []
    for kind, runs, macs, layers in cascade_macs(cfg):
        stages.append({"stage": kind, "runs_per_hop": runs, "mmac_per_run": macs / 1e6,
                       "mmac": runs * macs / 1e6,
                       "layers": [{"name": name, "mmac": m / 1e6} for name, m in layers]})
    return {"mode": cfg.mode, "sources": cfg.num_sources, "stages": stages,
            "total_mmac": sum(s["mmac"] for s in stages), "unit": "MMAC per 10 ms hop"}


def cmd_macs(args) -> int:
    table = macs_table(resolve_cascade(args))
    if args.json:
        print(json.dumps(table))
        return 0
    for st in table["stages"]:
        print(f"[{st['stage']}] x{st['runs_per_hop']}")
        for layer in st["layers"]:
            print(f"  {layer['name']:<14} {layer['mmac']:9.4f}")
        print(f"  {'subtotal':<14} {st['mmac']:9.4f}")
    print(f"total {table['total_mmac']:.3f} MMAC per 10 ms")
    return 0


# ---- inspect-weights ----

def cmd_inspect(args) -> int:
    expected = None
    if args.config or args.preset:
        cfg = resolve_cascade(argparse.Namespace(**{**vars(args), "weights": None}))
        expected = {s.kind: s.config for s in cfg.stages}
    for path in args.paths:
        bundle = read_bundle(path)
        if expected is not None:
            kind = args.stage or Path(path).stem.upper()
            if kind not in expected:
                raise UsageError(f"cannot tell which stage {path} belongs to; pass --stage")
            load_weights(path, expected[kind])
        else:
            load_weights(path)
        params = int(sum(t.size for t in bundle.tensors.values()))
        info = {"path": str(path), "fingerprint": f"{bundle.fingerprint:016x}", "parameters": params,
                "topology": dict(line.split(" = ", 1) for line in bundle.topology.splitlines() if line),
                "tensors": {k: list(v.shape) for k, v in bundle.tensors.items()}}
        if args.json:
            print(json.dumps(info))
        else:
            print(f"{path}: fingerprint {info['fingerprint']}, {params} parameters")
            for k, v in info["topology"].items():
                print(f"  {k} = {v}")
            for k, shape in info["tensors"].items():
                print(f"  {k:<24} {tuple(shape)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rtsep", description="Real-time cascaded speech separation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("separate", help="separate 16 kHz mono WAV files")
    p.add_argument("inputs", nargs="+")
    _add_cascade_args(p)
    _add_weight_arg(p)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--two-pass", action="store_true", help="warm up on a first pass, write the second")
    p.add_argument("--keep-intermediate", action="store_true", help="also write NS and SS stage outputs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", help="score estimates against targets (JSON lines)")
    p.add_argument("--targets", nargs="+", required=True)
    p.add_argument("--estimates", nargs="+", required=True)
    p.add_argument("--sources", type=int, help="files per item (default 2)")
    p.add_argument("--delay", type=int, default=0, help="estimate delay in samples to compensate")
    p.add_argument("--warmup", type=int, default=0, help="aligned samples to skip before scoring")
    p.add_argument("--threshold-db", type=float, default=-10.0)
    p.add_argument("--external", action="append", help="key=value score merged into each record")
    p.add_argument("--out", help="JSON-lines output file (default stdout)")
    p.add_argument("--json", action="store_true", help="accepted for symmetry; output is always JSON lines")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic reverberant mixtures")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--sources", type=int)
    p.add_argument("--snr", default="5", help="dB, or 'none' for no noise")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--speech", nargs="+", help="speech WAVs (default: synthetic stand-ins)")
    p.add_argument("--noise", help="noise WAV (default: synthetic pink noise)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("macs", help="analytic MAC count per 10 ms")
    _add_cascade_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("inspect-weights", help="print weight bundle contents")
    p.add_argument("paths", nargs="+")
    _add_cascade_args(p)
    p.add_argument("--stage", help="stage kind to check against (default from file name)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SEP_RT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except RtsepError as exc:
        print(f"rtsep: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rtsep: error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
