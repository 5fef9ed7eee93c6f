"""Build a small forest world, forge some submissions, and see how pixel MSE scores them.

Run:  python demos/world_and_attacks.py
"""
import numpy as np

from veriforet import attacks, baselines, scenesim

cfg = scenesim.WorldConfig(grid_size=4, seed=3)
world = scenesim.generate_world(cfg)
ds = scenesim.build_dataset(world, capture_seed=1)

print("forest cover per parcel (rows) at t = 0, 1, 2")
for i in range(cfg.grid_size):
    print("  ", "  ".join("/".join(f"{c:.2f}" for c in world.covers()[i, j]) for j in range(cfg.grid_size)))

# The cover regressor stands in for a valuation model; the PGD attack tries to inflate it.
regressor = attacks.train_cover_regressor(ds, attacks.RegressorConfig(epochs=60))
forged = attacks.generate_attacks(ds, regressor=regressor, pgd=attacks.PGDParams(steps=10))

by_label = {}
for s in forged.submissions:
    if s.vacuous:
        continue
    d = baselines.pixel_distance(s.image, forged.satellite[s.cell])
    by_label.setdefault(s.label, []).append(d)

print("\nmean pixel MSE to the claimed satellite tile")
for label, ds_ in sorted(by_label.items()):
    print(f"  {label:15s} n={len(ds_):3d}  {np.mean(ds_):.5f}")

adv = [s for s in forged.submissions if s.label == "adversarial"][:5]
print("\nregressor output before -> after PGD")
for s in adv:
    st = s.provenance[-1]
    print(f"  {s.id}: {st['predictedBefore']:.3f} -> {st['predictedAfter']:.3f}")
