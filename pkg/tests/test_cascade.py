from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtsep.cascade import (
    Cascade,
    CascadeConfig,
    StageSpec,
    cascade_macs,
    cascade_preset,
    dump_cascade_config,
    load_cascade_config,
    process_offline,
    process_stream,
    separate_multi,
    separate_recursive,
    separate_subtractive,
    total_macs,
    two_pass,
)
from rtsep.errors import ConfigError, SizeError
from rtsep.network import NS, SS, SS_SUB, ModelConfig, build, identity_params, mac_count, save_weights
from rtsep.network.model import random_params
from rtsep.spectral import SpectrumHistory, apply_ctf, compress_features, snap, stft

SMALL = ModelConfig(encoder_channels=(4, 4, 8, 8), rnn_kind="GRU", rnn_groups=2)
SMALL_LSTM = replace(SMALL, rnn_kind="LSTM", rnn_hidden=None)


def small_cascade(mode="subtractive", r=2, weights=None, seed=0, dr=True):
    ss = SMALL_LSTM.with_decoders(1 if mode == "subtractive" else r)
    stages = [StageSpec("NS", SMALL, weights), StageSpec("SS", ss, weights)]
    if dr:
        stages.append(StageSpec("DR", SMALL, weights))
    return CascadeConfig(tuple(stages), mode, r, seed)


def noise(n, seed=0):
    return 0.1 * np.random.default_rng(seed).standard_normal(n)


def with_zero_decoder(model_cfg, d, base=None):
    params = base or identity_params(model_cfg)
    params = dict(params)
    params[f"dec{d}.out.bias"] = np.zeros_like(params[f"dec{d}.out.bias"])
    params[f"dec{d}.out.weight"] = np.zeros_like(params[f"dec{d}.out.weight"])
    return params


# ---- configuration ----

def test_config_validation():
    ns, dr = StageSpec("NS", NS), StageSpec("DR", SMALL)
    with pytest.raises(ConfigError, match="D = R"):
        CascadeConfig((ns, StageSpec("SS", SS_SUB)), "multi", 2)
    with pytest.raises(ConfigError, match="D = 1"):
        CascadeConfig((ns, StageSpec("SS", SS)), "subtractive", 2)
    with pytest.raises(ConfigError, match="exactly one SS"):
        CascadeConfig((ns, dr), "subtractive", 2)
    with pytest.raises(ConfigError, match="order"):
        CascadeConfig((StageSpec("SS", SS_SUB), ns), "subtractive", 2)
    with pytest.raises(ConfigError, match="R must be >= 2"):
        CascadeConfig((StageSpec("SS", SS_SUB),), "subtractive", 1)
    with pytest.raises(ConfigError):
        cascade_preset("nope")
    assert cascade_preset("Cas", 3).stage("SS").config.decoders == 3
    assert cascade_preset("E2E", 2).e2e


def test_ini_round_trip(tmp_path):
    cfg = small_cascade("multi", 2)
    text = dump_cascade_config(cfg)
    path = tmp_path / "c.ini"
    path.write_text(text)
    again = load_cascade_config(path)
    assert again.mode == "multi" and again.num_sources == 2
    assert [s.config for s in again.stages] == [s.config for s in cfg.stages]


def test_ini_relative_weights_and_overrides(tmp_path):
    save_weights(build(NS, seed=1), tmp_path / "ns.crwb")
    (tmp_path / "c.ini").write_text(
        "[cascade]\nmode = subtractive\nsources = 2\nstages = NS, SS\n\n"
        "[NS]\nweights = ns.crwb\n\n[SS]\nencoder_channels = 4,4,8,8\nrnn_groups = 2\n"
    )
    cfg = load_cascade_config(tmp_path / "c.ini")
    assert cfg.stage("NS").weights == str(tmp_path / "ns.crwb")
    assert cfg.stage("SS").config.decoders == 1
    assert cfg.stage("SS").config.encoder_channels == (4, 4, 8, 8)
    cascade = Cascade.build(cfg)
    assert np.array_equal(cascade.models["NS"].params["enc1.weight"], build(NS, seed=1).params["enc1.weight"])
    (tmp_path / "bad.ini").write_text("[cascade]\nmode = subtractive\n[NS]\ncolour = red\n")
    with pytest.raises(ConfigError):
        load_cascade_config(tmp_path / "bad.ini")


# ---- identities ----

@pytest.mark.parametrize("mode,r", [("multi", 2), ("multi", 3), ("subtractive", 2), ("subtractive", 3)])
def test_identity_cascade(mode, r):
    cascade = Cascade.build(small_cascade(mode, r, "identity"))
    x = noise(3200)
    out = process_stream(cascade.session(), x)
    d = cascade.stft.delay
    assert np.max(np.abs(out[0, d:] - x[:-d])) < 1e-6
    for b in range(1, r):
        if mode == "multi":
            assert np.max(np.abs(out[b, d:] - x[:-d])) < 1e-6
        else:
            # float32 identity bias: 2 tanh(b) equals 1 only to ~1e-8
            assert np.max(np.abs(out[b])) < 1e-6


def test_subtractive_zero_taps_silences_first_branch():
    cfg = small_cascade("subtractive", 2, "identity")
    cascade = Cascade.build(cfg)
    ss = cascade.models["SS"]
    cascade.models["SS"] = build(ss.config, with_zero_decoder(ss.config, 0))
    session = cascade.session()
    session.trace = []
    out = process_stream(session, noise(1600))
    assert not np.any(out[0])
    for rec in session.trace:
        assert not np.any(rec["ss"][0])
        assert np.array_equal(rec["ss"][1], rec["ns"])


def test_latency_matches_single_stage():
    x = np.zeros(1600)
    x[400] = 1.0
    full = process_stream(Cascade.build(small_cascade("multi", 2, "identity")).session(), x)
    single = process_stream(Cascade.build(small_cascade("multi", 2, "identity", dr=False)).session(), x)
    assert np.argmax(np.abs(full[0])) == np.argmax(np.abs(single[0])) == 400 + 160


# ---- streaming / offline ----

@pytest.mark.parametrize("mode,r", [("subtractive", 2), ("multi", 2), ("subtractive", 3)])
def test_streaming_equals_offline(mode, r):
    cascade = Cascade.build(small_cascade(mode, r, seed=3))
    x = noise(8000, 1)
    streamed = process_stream(cascade.session(), x)
    offline = process_offline(cascade, x)
    assert np.max(np.abs(streamed - offline)) < 1e-5


def test_e2e_streaming_equals_offline():
    e2e = replace(SMALL_LSTM, decoders=2, kernel=(3, 3), rnn_layers=2)
    cascade = Cascade.build(CascadeConfig((StageSpec("E2E", e2e),), "e2e", 2, 4))
    x = noise(4800, 2)
    assert np.max(np.abs(process_stream(cascade.session(), x) - process_offline(cascade, x))) < 1e-5


def test_frame_size_error():
    session = Cascade.build(small_cascade(weights="identity")).session()
    with pytest.raises(SizeError):
        session.process_frame(np.zeros(100))


def test_dr_branches_match_independent_runs():
    cascade = Cascade.build(small_cascade("multi", 2, seed=5))
    session = cascade.session()
    session.trace = []
    process_stream(session, noise(3200, 3))
    dr = cascade.models["DR"]
    for b in range(2):
        state, hist = dr.new_state(), SpectrumHistory(3, 161, (1,))
        for rec in session.trace:
            x = rec["ss"][b][None]
            taps = dr.step(state, compress_features(x, 0.5))
            ref = snap(apply_ctf(hist.push(x), taps[:, 0]))[0]
            assert np.max(np.abs(ref - rec["output"][b])) < 1e-6


# ---- conservation ----

@pytest.mark.parametrize("r", [2, 3])
def test_subtractive_conservation_per_frame(r):
    cascade = Cascade.build(small_cascade("subtractive", r, seed=6))
    session = cascade.session()
    session.trace = []
    process_stream(session, noise(4800, 4))
    for rec in session.trace:
        total = rec["ss"][0]
        for b in range(1, r):
            total = total + rec["ss"][b]
        assert np.array_equal(total, rec["ns"])


def test_separate_subtractive_examples():
    rng = np.random.default_rng(7)
    model = build(SMALL, seed=7)
    state = model.new_state()
    hist = SpectrumHistory(3, 161, (1,))
    for _ in range(5):
        x = snap(rng.standard_normal(161) + 1j * rng.standard_normal(161))
        hist.push(x[None])
        x1, x2 = separate_subtractive(model, state, hist)
        assert np.array_equal(x1 + x2, x)
    # recomputation oracle: X2 == X - snap(apply_ctf(...)) to 0 ulps
    state_a, state_b = model.new_state(), model.new_state()
    hist = SpectrumHistory(3, 161, (1,))
    for _ in range(4):
        x = snap(rng.standard_normal(161) + 1j * rng.standard_normal(161))
        frames = hist.push(x[None])
        x1, x2 = separate_subtractive(model, state_a, hist)
        taps = model.step(state_b, compress_features(x[None], 0.5))
        oracle = x - snap(apply_ctf(frames, taps[:, 0]))[0]
        assert np.array_equal(x2, oracle)
    ident = build(SMALL, identity_params(SMALL))
    hist = SpectrumHistory(3, 161, (1,))
    hist.push(x[None])
    x1, x2 = separate_subtractive(ident, ident.new_state(), hist)
    assert np.allclose(x1, x, atol=1e-6) and np.allclose(x2, 0, atol=1e-6)
    with pytest.raises(ConfigError):
        separate_subtractive(build(SMALL.with_decoders(2)), None, hist)


def test_separate_multi_examples():
    cfg = SMALL.with_decoders(3)
    rng = np.random.default_rng(8)
    x = snap(rng.standard_normal(161) + 1j * rng.standard_normal(161))
    hist = SpectrumHistory(3, 161, (1,))
    hist.push(x[None])
    ident = build(cfg, identity_params(cfg))
    outs = separate_multi(ident, ident.new_state(), hist, 3)
    assert all(np.allclose(o, x, atol=1e-6) for o in outs)
    zeroed = build(cfg, with_zero_decoder(cfg, 1))
    outs = separate_multi(zeroed, zeroed.new_state(), hist)
    assert not np.any(outs[1]) and np.allclose(outs[0], x, atol=1e-6)
    with pytest.raises(ConfigError):
        separate_multi(ident, ident.new_state(), hist, 2)


def test_multi_weight_surgery_oracle():
    cfg = SMALL.with_decoders(2)
    params = random_params(cfg, seed=9)
    two = build(cfg, params)
    singles = []
    for d in range(2):
        p = {k: v for k, v in params.items() if not k.startswith("dec")}
        p.update({k.replace(f"dec{d}.", "dec0."): v for k, v in params.items() if k.startswith(f"dec{d}.")})
        singles.append(build(SMALL, p))
    rng = np.random.default_rng(10)
    states = [m.new_state() for m in [two] + singles]
    hist = SpectrumHistory(3, 161, (1,))
    for _ in range(5):
        x = snap(rng.standard_normal(161) + 1j * rng.standard_normal(161))
        hist.push(x[None])
        both = separate_multi(two, states[0], hist, 2)
        for d in range(2):
            one = separate_multi(singles[d], states[d + 1], hist, 1)[0]
            assert np.array_equal(both[d], one)


def test_branch_symmetry():
    cfg = SMALL.with_decoders(2)
    params = random_params(cfg, seed=11)
    swapped = dict(params)
    for k in params:
        if k.startswith("dec0."):
            swapped[k], swapped[k.replace("dec0.", "dec1.")] = params[k.replace("dec0.", "dec1.")], params[k]
    a, b = build(cfg, params), build(cfg, swapped)
    x = compress_features(np.random.default_rng(12).standard_normal((1, 20, 161)) + 0j, 0.5)
    ta, tb = a.forward(x.astype(np.float32)), b.forward(x.astype(np.float32))
    assert np.array_equal(ta[:, :, 0], tb[:, :, 1]) and np.array_equal(ta[:, :, 1], tb[:, :, 0])


def test_separate_recursive_examples():
    model = build(SMALL, seed=13)
    spec = snap(stft(noise(3200, 5)))
    assert len(separate_recursive(model, np.zeros((10, 161), complex), 4)) == 1
    out = separate_recursive(model, spec, 2)
    # max_sources = 2 equals streamed subtractive separation
    state, hist = model.new_state(), SpectrumHistory(3, 161, (1,))
    for n in range(len(spec)):
        hist.push(spec[n][None])
        x1, x2 = separate_subtractive(model, state, hist)
        assert np.max(np.abs(out[0][n] - x1)) < 1e-5
        assert np.max(np.abs(out[1][n] - x2)) < 1e-5
    total = out[0] + out[1]
    assert np.array_equal(total, spec)
    ident = build(SMALL, identity_params(SMALL))
    out = separate_recursive(ident, spec, 3)
    assert len(out) == 2 and np.max(np.abs(out[1])) < 1e-6
    rec = separate_recursive(model, spec, 4, stop_threshold_db=-300)
    acc = rec[0]
    for s in rec[1:]:
        acc = acc + s
    assert len(rec) == 4 and np.array_equal(acc, spec)


# ---- causality ----

@settings(max_examples=8)
@given(st.one_of(st.integers(0, 3199), st.integers(0, 19).map(lambda k: 160 * k + 159)))
def test_cascade_causality(t0):
    cascade = Cascade.build(small_cascade("subtractive", 2, seed=14))
    x = noise(3200, 6)
    y = x.copy()
    y[t0] += 1.0
    a = process_stream(cascade.session(), x)
    b = process_stream(cascade.session(), y)
    cut = t0 // 160 * 160
    assert np.array_equal(a[:, :cut], b[:, :cut])


def test_two_pass_identity_differs_only_in_warmup():
    cascade = Cascade.build(small_cascade("multi", 2, "identity"))
    x = noise(3200, 7)
    first = process_stream(cascade.session(), x)
    second = two_pass(cascade.session(), x)
    warm = cascade.stft.window_len
    assert np.max(np.abs(first[:, warm:] - second[:, warm:])) < 1e-9
    assert np.max(np.abs(first[:, :warm] - second[:, :warm])) > 1e-3


# ---- complexity ----

def test_cascade_macs_additive():
    for name in ("CasSUB", "Cas", "E2E"):
        cfg = cascade_preset(name)
        rows = cascade_macs(cfg)
        assert total_macs(cfg) == sum(n * mac_count(s.config) for (kind, n, _, _), s in zip(rows, cfg.stages))
    sub = cascade_preset("CasSUB")
    assert [n for _, n, _, _ in cascade_macs(sub)] == [1, 1, 2]
    assert total_macs(cascade_preset("CasSUB")) < total_macs(cascade_preset("Cas")) < total_macs(cascade_preset("E2E"))
