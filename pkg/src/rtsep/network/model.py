"""Generalized CRUSE inference: causal conv encoder, grouped recurrent bottleneck and
``D`` transposed-conv decoders that each emit a bounded complex CTF per bin.

Feature maps are kept as ``(batch, freq, channels)``. Every stream in a batch is
independent; batching only exists so that branches sharing weights (the per-branch
de-reverberation stage) can be stepped with one matrix product per layer.

Two code paths exist: :meth:`Model.step` advances one frame against ring buffers, and
:meth:`Model.forward` runs whole sequences layer by layer. They share parameters but
not loop structure, which is what the streaming/offline equivalence tests rely on.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from rtsep.errors import ConfigError, SizeError
from rtsep.network.config import NUM_LEVELS, ModelConfig

LEAKY_SLOPE = 0.2
OUTPUT_SCALE = 2.0
INIT_RANGE = 0.05
_GATES = {"GRU": 3, "LSTM": 4}
_OFFLINE_CHUNK = 128


def param_shapes(config: ModelConfig) -> dict:
    """Ordered ``name -> shape`` for every parameter tensor of ``config``."""
    ch = (2,) + config.encoder_channels
    kt, kf = config.kernel
    shapes = {}
    for level in range(1, NUM_LEVELS + 1):
        shapes[f"enc{level}.weight"] = (ch[level], ch[level - 1], kt, kf)
        shapes[f"enc{level}.bias"] = (ch[level],)
    g = config.rnn_groups
    hg = config.bottleneck_width // g
    gates = _GATES[config.rnn_kind]
    for layer in range(config.rnn_layers):
        shapes[f"rnn{layer}.w_ih"] = (g, hg, gates * hg)
        shapes[f"rnn{layer}.w_hh"] = (g, hg, gates * hg)
        shapes[f"rnn{layer}.b_ih"] = (g, gates * hg)
        shapes[f"rnn{layer}.b_hh"] = (g, gates * hg)
    for d in range(config.decoders):
        for level in range(NUM_LEVELS, 0, -1):
            out_ch = ch[level - 1] if level > 1 else ch[1]
            shapes[f"dec{d}.skip{level}.weight"] = (ch[level], ch[level])
            shapes[f"dec{d}.skip{level}.bias"] = (ch[level],)
            shapes[f"dec{d}.conv{level}.weight"] = (out_ch, ch[level], kt, kf)
            shapes[f"dec{d}.conv{level}.bias"] = (out_ch,)
        shapes[f"dec{d}.out.weight"] = (2 * config.tap_count, ch[1])
        shapes[f"dec{d}.out.bias"] = (2 * config.tap_count,)
    return shapes


def random_params(config: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {
        name: rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
        for name, shape in param_shapes(config).items()
    }


def identity_params(config: ModelConfig) -> dict:
    """All-zero weights whose output bias makes every decoder emit the identity CTF."""
    params = {name: np.zeros(shape, np.float32) for name, shape in param_shapes(config).items()}
    t_taps, f_taps = config.ctf_taps
    center = f_taps // 2  # lag 0, middle frequency tap, real channel
    for d in range(config.decoders):
        params[f"dec{d}.out.bias"][center] = math.atanh(1.0 / OUTPUT_SCALE)
    return params


def _leaky(x):
    return np.maximum(x, LEAKY_SLOPE * x)


def _enc_pads(in_freq, out_freq, kf, stride):
    left = kf // 2
    right = max(0, (out_freq - 1) * stride + kf - in_freq - left)
    return left, right


def _matmul(patches, wmat, bias):
    lead = patches.shape[:-1]
    out = patches.reshape(-1, patches.shape[-1]) @ wmat
    out += bias
    return out.reshape(lead + (wmat.shape[1],))


class _Conv:
    """Causal-in-time convolution stored as an im2col matrix."""

    def __init__(self, weight, bias, stride, in_freq, out_freq, pads):
        out_ch, in_ch, kt, kf = weight.shape
        self.kt, self.kf, self.in_ch, self.out_ch = kt, kf, in_ch, out_ch
        self.stride, self.in_freq, self.out_freq, self.pads = stride, in_freq, out_freq, pads
        # kernel time index 0 multiplies the oldest frame, kt - 1 the current one
        self.wmat = np.ascontiguousarray(weight.transpose(2, 1, 3, 0).reshape(kt * in_ch * kf, out_ch))
        self.bias = bias

    def new_buffer(self, batch, dtype):
        return np.zeros((batch, self.kt, self.pads[0] + self.in_freq + self.pads[1], self.in_ch), dtype)

    def patches(self, stack):
        # stack: (..., kt, Fpad, Cin) -> (..., Fout, kt*Cin*kf)
        win = sliding_window_view(stack, self.kf, axis=-2)[..., :: self.stride, :, :][..., : self.out_freq, :, :]
        nd = win.ndim
        order = tuple(range(nd - 4)) + (nd - 3, nd - 4, nd - 2, nd - 1)
        win = win.transpose(order)
        return win.reshape(win.shape[:-3] + (-1,))

    def step(self, buf, x):
        """``buf``: (B, kt, Fpad, Cin) ring of padded inputs, updated in place; ``x``: (B, F, Cin)."""
        buf[:, :-1] = buf[:, 1:]
        buf[:, -1, self.pads[0]: self.pads[0] + self.in_freq] = x
        return _matmul(self.patches(buf), self.wmat, self.bias)

    def forward(self, x):
        """``x``: (B, N, F, Cin) whole sequence -> (B, N, Fout, Cout)."""
        b, n = x.shape[:2]
        xp = np.zeros((b, n + self.kt - 1, self.pads[0] + self.in_freq + self.pads[1], self.in_ch), x.dtype)
        xp[:, self.kt - 1:, self.pads[0]: self.pads[0] + self.in_freq] = x
        tw = np.moveaxis(sliding_window_view(xp, self.kt, axis=1), -1, 2)  # (B, N, kt, Fpad, Cin)
        out = np.empty((b, n, self.out_freq, self.out_ch), dtype=self.wmat.dtype)
        for start in range(0, n, _OFFLINE_CHUNK):
            stop = min(n, start + _OFFLINE_CHUNK)
            out[:, start:stop] = _matmul(self.patches(tw[:, start:stop]), self.wmat, self.bias)
        return out


class _UpConv:
    """Frequency-upsampling (transposed) convolution: zero insertion then a same-padded causal conv.

    :meth:`forward` runs the dense zero-inserted form; :meth:`step` uses the equivalent
    polyphase form, which skips the inserted zeros.
    """

    def __init__(self, weight, bias, stride, in_freq, out_freq):
        kf = weight.shape[3]
        half = kf // 2
        self.stride, self.in_freq, self.out_freq = stride, in_freq, out_freq
        self.dense = _Conv(weight, bias, 1, out_freq, out_freq, (half, half))
        self.kt, self.in_ch, self.out_ch = self.dense.kt, self.dense.in_ch, self.dense.out_ch
        self.bias = bias
        # output p = stride*i + phase reads zero-inserted index p + j - half, i.e. input i + offset
        self.phases = []
        offsets_all = []
        for phase in range(stride):
            taps = [j for j in range(kf) if (phase + j - half) % stride == 0]
            offsets = [(phase + j - half) // stride for j in taps]
            count = len(range(phase, out_freq, stride))
            if count == 0:
                continue
            wmat = np.ascontiguousarray(weight[:, :, :, taps].transpose(2, 1, 3, 0).reshape(-1, self.out_ch))
            self.phases.append((phase, count, np.asarray(offsets), wmat))
            offsets_all += offsets
        self.left = max(0, -min(offsets_all))
        max_index = max(count - 1 + max(offs) for _, count, offs, _ in self.phases)
        self.right = max(0, max_index - (in_freq - 1))
        self.index = [np.arange(count)[:, None] + offs[None, :] + self.left for _, count, offs, _ in self.phases]

    def new_buffer(self, batch, dtype):
        return np.zeros((batch, self.kt, self.left + self.in_freq + self.right, self.in_ch), dtype)

    def step(self, buf, x):
        buf[:, :-1] = buf[:, 1:]
        buf[:, -1, self.left: self.left + self.in_freq] = x
        out = np.empty((x.shape[0], self.out_freq, self.out_ch), x.dtype)
        for (phase, count, offs, wmat), idx in zip(self.phases, self.index):
            g = buf[:, :, idx]  # (B, kt, count, taps, Cin)
            patches = g.transpose(0, 2, 1, 4, 3).reshape(x.shape[0], count, -1)
            out[:, phase:: self.stride] = _matmul(patches, wmat, self.bias)
        return out

    def forward(self, x):
        return self.dense.forward(_upsample(x, self.stride, self.out_freq))


def _upsample(x, stride, out_freq):
    """Zero-insertion along frequency: (..., F, C) -> (..., out_freq, C)."""
    u = np.zeros(x.shape[:-2] + (out_freq, x.shape[-1]), x.dtype)
    u[..., ::stride, :][..., : x.shape[-2], :] = x
    return u


class _RNN:
    """One grouped GRU or LSTM layer (torch gate order: r,z,n / i,f,g,o)."""

    def __init__(self, kind, w_ih, w_hh, b_ih, b_hh):
        self.kind = kind
        self.w_ih, self.w_hh = w_ih, w_hh
        self.b_ih, self.b_hh = b_ih[:, None], b_hh[:, None]
        self.groups, self.hg = w_hh.shape[0], w_hh.shape[1]

    def _split(self, x):
        # (B, W) -> (g, B, W/g)
        return x.reshape(x.shape[0], self.groups, -1).transpose(1, 0, 2)

    def _merge(self, x):
        return x.transpose(1, 0, 2).reshape(x.shape[1], -1)

    def cell(self, gi, h, c):
        """``gi``: (g, B, gates*hg) input projection incl. bias; ``h``, ``c``: (g, B, hg)."""
        gh = h @ self.w_hh + self.b_hh
        hg = self.hg
        if self.kind == "GRU":
            r = expit(gi[..., :hg] + gh[..., :hg])
            z = expit(gi[..., hg: 2 * hg] + gh[..., hg: 2 * hg])
            n = np.tanh(gi[..., 2 * hg:] + r * gh[..., 2 * hg:])
            return (1.0 - z) * n + z * h, c
        gates = gi + gh
        i = expit(gates[..., :hg])
        f = expit(gates[..., hg: 2 * hg])
        g = np.tanh(gates[..., 2 * hg: 3 * hg])
        o = expit(gates[..., 3 * hg:])
        c = f * c + i * g
        return o * np.tanh(c), c

    def step(self, x, h, c):
        gi = self._split(x) @ self.w_ih + self.b_ih
        h, c = self.cell(gi, self._split(h), self._split(c) if c is not None else None)
        return self._merge(h), (self._merge(c) if c is not None else None)

    def forward(self, x):
        """``x``: (B, N, W) -> (B, N, W), zero initial state."""
        b, n, w = x.shape
        xs = x.reshape(b, n, self.groups, -1).transpose(2, 0, 1, 3)  # (g, B, N, W/g)
        gi_all = xs @ self.w_ih[:, None] + self.b_ih[:, :, None]
        h = np.zeros((self.groups, b, self.hg), x.dtype)
        c = np.zeros_like(h) if self.kind == "LSTM" else None
        out = np.empty((self.groups, b, n, self.hg), x.dtype)
        for t in range(n):
            h, c = self.cell(gi_all[:, :, t], h, c)
            out[:, :, t] = h
        return out.transpose(1, 2, 0, 3).reshape(b, n, w)


class ModelState:
    """Per-stream recurrent and convolution-buffer state for one :class:`Model`."""

    def __init__(self, model: "Model", batch: int = 1):
        self.model = model
        self.batch = batch
        dt = model.dtype
        self.enc_bufs = [conv.new_buffer(batch, dt) for conv in model.encoder]
        self.dec_bufs = [[conv.new_buffer(batch, dt) for conv in dec["convs"]] for dec in model.decoders]
        w = model.config.bottleneck_width
        self.h = [np.zeros((batch, w), dt) for _ in model.rnns]
        self.c = [np.zeros((batch, w), dt) if model.config.rnn_kind == "LSTM" else None for _ in model.rnns]

    def reset(self):
        for buf in self.enc_bufs:
            buf[:] = 0
        for bufs in self.dec_bufs:
            for buf in bufs:
                buf[:] = 0
        for h in self.h:
            h[:] = 0
        for c in self.c:
            if c is not None:
                c[:] = 0


class Model:
    """Immutable weights plus the derived im2col matrices; safe to share across streams."""

    def __init__(self, config: ModelConfig, params: dict, dtype=np.float32):
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConfigError(f"parameter set does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name])):
                raise ConfigError(f"{name}: non-finite values")
        self.config = config
        self.params = {k: np.asarray(params[k], np.float32) for k in expected}
        self.dtype = np.dtype(dtype)
        p = {k: v.astype(self.dtype) for k, v in self.params.items()}
        freqs = config.freq_extents
        sf = config.stride[1]
        kf = config.kernel[1]
        self.encoder = [
            _Conv(p[f"enc{l}.weight"], p[f"enc{l}.bias"], sf, freqs[l - 1], freqs[l],
                  _enc_pads(freqs[l - 1], freqs[l], kf, sf))
            for l in range(1, NUM_LEVELS + 1)
        ]
        self.rnns = [
            _RNN(config.rnn_kind, p[f"rnn{m}.w_ih"], p[f"rnn{m}.w_hh"], p[f"rnn{m}.b_ih"], p[f"rnn{m}.b_hh"])
            for m in range(config.rnn_layers)
        ]
        self.decoders = []
        for d in range(config.decoders):
            levels = range(NUM_LEVELS, 0, -1)
            self.decoders.append({
                "skips": [(p[f"dec{d}.skip{l}.weight"].T.copy(), p[f"dec{d}.skip{l}.bias"]) for l in levels],
                "convs": [_UpConv(p[f"dec{d}.conv{l}.weight"], p[f"dec{d}.conv{l}.bias"], sf, freqs[l], freqs[l - 1])
                          for l in levels],
                "out": (p[f"dec{d}.out.weight"].T.copy(), p[f"dec{d}.out.bias"]),
            })

    def new_state(self, batch: int = 1) -> ModelState:
        return ModelState(self, batch)

    def _check_features(self, features, seq):
        features = np.asarray(features)
        shape = (2, self.config.input_bins)
        if features.shape[-2:] != shape or features.ndim != (4 if seq else 3):
            want = "(batch, frames, 2, bins)" if seq else "(batch, 2, bins)"
            raise SizeError(f"features must have shape {want} with 2 x {self.config.input_bins} values, "
                            f"got {features.shape}")
        # (.., 2, K) -> (.., K, 2)
        return np.swapaxes(features, -1, -2).astype(self.dtype)

    def _taps(self, logits):
        t_taps, f_taps = self.config.ctf_taps
        n = self.config.tap_count
        bounded = OUTPUT_SCALE * np.tanh(logits.astype(np.float64))
        taps = bounded[..., :n] + 1j * bounded[..., n:]
        return taps.reshape(taps.shape[:-1] + (t_taps, f_taps))

    def step(self, state: ModelState, features) -> np.ndarray:
        """Advance one frame.

        Args:
            features: ``(batch, 2, bins)`` compressed real/imag input.

        Returns:
            Complex taps ``(batch, D, bins, time_taps, freq_taps)``.
        """
        if state.model is not self:
            raise ConfigError("state was created for a different model")
        x = self._check_features(features, seq=False)
        if x.shape[0] != state.batch:
            raise SizeError(f"batch {x.shape[0]} does not match state batch {state.batch}")
        skips = []
        for conv, buf in zip(self.encoder, state.enc_bufs):
            x = _leaky(conv.step(buf, x))
            skips.append(x)
        shape = x.shape
        z = x.reshape(shape[0], -1)
        for m, rnn in enumerate(self.rnns):
            state.h[m], state.c[m] = rnn.step(z, state.h[m], state.c[m])
            z = state.h[m]
        z = z.reshape(shape)
        outs = []
        for dec, bufs in zip(self.decoders, state.dec_bufs):
            y = z
            for level_idx, ((ws, bs), conv, buf) in enumerate(zip(dec["skips"], dec["convs"], bufs)):
                y = y + skips[NUM_LEVELS - 1 - level_idx] @ ws + bs
                y = _leaky(conv.step(buf, y))
            wo, bo = dec["out"]
            outs.append(y @ wo + bo)
        return self._taps(np.stack(outs, axis=1))

    def forward(self, features) -> np.ndarray:
        """Whole-sequence pass from zero state.

        Args:
            features: ``(batch, frames, 2, bins)``.

        Returns:
            Complex taps ``(batch, frames, D, bins, time_taps, freq_taps)``.
        """
        x = self._check_features(features, seq=True)
        skips = []
        for conv in self.encoder:
            x = _leaky(conv.forward(x))
            skips.append(x)
        shape = x.shape
        z = x.reshape(shape[0], shape[1], -1)
        for rnn in self.rnns:
            z = rnn.forward(z)
        z = z.reshape(shape)
        outs = []
        for dec in self.decoders:
            y = z
            for level_idx, ((ws, bs), conv) in enumerate(zip(dec["skips"], dec["convs"])):
                y = y + skips[NUM_LEVELS - 1 - level_idx] @ ws + bs
                y = _leaky(conv.forward(y))
            wo, bo = dec["out"]
            outs.append(y @ wo + bo)
        return self._taps(np.stack(outs, axis=2))


def build(config: ModelConfig, params: dict | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Build a model; without ``params`` the weights are seeded uniform in [-0.05, 0.05]."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build() expects a ModelConfig")
    config.validate()
    return Model(config, random_params(config, seed) if params is None else params, dtype=dtype)
