"""Analytic MMAC per 10 ms hop for the three presets, next to the published figures."""

from rtsep.cascade import cascade_macs, cascade_preset

REFERENCE = {"CasSUB": 46.0, "Cas": 54.0, "E2E": 60.0}
SEPFORMER = 626.0

for name, ref in REFERENCE.items():
    rows = cascade_macs(cascade_preset(name))
    total = sum(runs * macs for _, runs, macs, _ in rows) / 1e6
    stages = ", ".join(f"{kind} {runs}x{macs / 1e6:.2f}" for kind, runs, macs, _ in rows)
    print(f"{name:<7} {total:7.2f} MMAC  (reference {ref:.0f}, ratio {total / ref:.2f}, "
          f"{SEPFORMER / total:.1f}x below SepFormer)  [{stages}]")
