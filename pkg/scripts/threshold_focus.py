"""Sensitivity of the soft-thresholded log loss to one source's residual error, across loss levels.

Prints d(objective)/d(log error gain) with and without the threshold; below tau the
thresholded objective stops rewarding further improvement of that source.
"""

import numpy as np

from rtsep.datagen import synthetic_noise, synthetic_source
from rtsep.objectives import ccmse, level_normalized_pair, soft_threshold

TAU = 0.1
target = synthetic_source(0, 16000)
noise = synthetic_noise(1, 16000)


def loss(g):
    s, e = level_normalized_pair(target, target + g * noise)
    return ccmse(s, e, 0.5, 1.0)


h = 1e-3
print(f"{'gain':>8} {'loss dB':>8} {'thresholded':>12} {'plain':>8}")
for g in np.logspace(-3, 0.5, 8):
    up, down = loss(g * np.exp(h)), loss(g * np.exp(-h))
    th = (soft_threshold(up, TAU) - soft_threshold(down, TAU)) / (2 * h)
    plain = 10 * (np.log10(up) - np.log10(down)) / (2 * h)
    print(f"{g:8.4f} {10 * np.log10(loss(g)):8.1f} {th:12.4f} {plain:8.4f}")
