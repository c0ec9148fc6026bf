"""CSE of synthetic cross-talk estimates against the closed form, over a grid of leakage factors.

The last column evaluates the closed form with the two leakage factors swapped in the
numerator, showing where that variant drifts away from the measured value.
"""

import numpy as np

from rtsep.metrics import CrossTalkModel, cse, cse_oracle, orthogonalize

rng = np.random.default_rng(0)
sa, sb = orthogonalize(rng.standard_normal((2, 16000)) * [[1.0], [0.3]])
pa, pb = sa @ sa, sb @ sb
print(f"{'alpha_a':>8} {'alpha_b':>8} {'CSE':>8} {'oracle':>8} {'swapped':>8}")
for aa in (0.01, 0.1, 0.3):
    for ab in (0.01, 0.1, 0.3):
        model = CrossTalkModel(sa, sb, aa, ab)
        swapped = (aa * pa + ab * pb) / ((1 + ab**2) * pa + (1 + aa**2) * pb)
        print(f"{aa:8.2f} {ab:8.2f} {cse(*model.estimates()):8.2f} {cse_oracle(model):8.2f} "
              f"{-20 * np.log10(swapped):8.2f}")
