"""Real-time factor of each preset with random weights on white noise."""

import argparse
import time

import numpy as np

from rtsep.cascade import Cascade, cascade_preset, process_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--presets", nargs="+", default=["CasSUB", "Cas", "E2E"])
    args = ap.parse_args()
    x = 0.1 * np.random.default_rng(0).standard_normal(int(args.seconds * 16000))
    for name in args.presets:
        cascade = Cascade.build(cascade_preset(name))
        start = time.perf_counter()
        process_stream(cascade.session(), x)
        wall = time.perf_counter() - start
        print(f"{name:<7} {wall:7.2f} s for {args.seconds:.0f} s audio  RTF {wall / args.seconds:.3f}")


if __name__ == "__main__":
    main()
