"""Closed-form multiply-accumulate counts per 10 ms frame (one hop).

Conventions: a convolution costs kernel volume x input channels x output channels per
output grid point (transposed convolutions are counted on their output grid); a GRU
layer with input ``i`` and hidden ``h`` costs ``3(h*i + h*h + h)`` per group, an LSTM
``4(h*i + h*h + h)``; applying a complex CTF tap costs 4 real MACs. Nonlinearities and
bias additions are free.
"""

from __future__ import annotations

from rtsep.network.config import NUM_LEVELS, ModelConfig

_GATES = {"GRU": 3, "LSTM": 4}


def conv_macs(out_freq: int, in_ch: int, out_ch: int, kernel=(1, 1)) -> int:
    return out_freq * in_ch * out_ch * kernel[0] * kernel[1]


def rnn_macs(kind: str, inputs: int, hidden: int, groups: int = 1) -> int:
    i, h = inputs // groups, hidden // groups
    return groups * _GATES[kind] * (h * i + h * h + h)


def ctf_macs(bins: int, time_taps: int, freq_taps: int) -> int:
    half = freq_taps // 2
    valid = sum(min(bins - 1, k + half) - max(0, k - half) + 1 for k in range(bins))
    return 4 * time_taps * valid


def layer_macs(config: ModelConfig) -> list:
    """Per-layer ``(name, macs)`` breakdown for one module including its CTF filtering."""
    ch = (2,) + config.encoder_channels
    freqs = config.freq_extents
    kt, kf = config.kernel
    rows = []
    for level in range(1, NUM_LEVELS + 1):
        rows.append((f"enc{level}", conv_macs(freqs[level], ch[level - 1], ch[level], (kt, kf))))
    width = config.bottleneck_width
    for layer in range(config.rnn_layers):
        rows.append((f"rnn{layer}", rnn_macs(config.rnn_kind, width, width, config.rnn_groups)))
    for d in range(config.decoders):
        for level in range(NUM_LEVELS, 0, -1):
            rows.append((f"dec{d}.skip{level}", conv_macs(freqs[level], ch[level], ch[level])))
            out_ch = ch[level - 1] if level > 1 else ch[1]
            rows.append((f"dec{d}.conv{level}", conv_macs(freqs[level - 1], ch[level], out_ch, (kt, kf))))
        rows.append((f"dec{d}.out", conv_macs(freqs[0], ch[1], 2 * config.tap_count)))
        rows.append((f"dec{d}.ctf", ctf_macs(config.input_bins, *config.ctf_taps)))
    return rows


def mac_count(config: ModelConfig) -> int:
    """Total MACs per hop for one module."""
    return sum(m for _, m in layer_macs(config))
