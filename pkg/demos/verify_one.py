"""Train a verifier end to end through the public API, then judge single submissions.

Run:  python demos/verify_one.py
"""
from veriforet import attacks, evalharness, metriclearn, scenesim, verifier

world = scenesim.generate_world(scenesim.WorldConfig(grid_size=5, seed=11))
base = scenesim.build_dataset(world, capture_seed=2)
ds = attacks.generate_attacks(base, types=("loc", "time"))

splits = evalharness.split_parcels(5, evalharness.SplitConfig(validation_rows=1, test_rows=1))
train, val, test = (ds.subset(splits[k]) for k in ("train", "validation", "test"))

model = metriclearn.train_metric(train, val, metriclearn.TrainConfig(max_epochs=120, patience=30))
val_subs = evalharness.evaluable(val)
dist = evalharness.metric_distances("learned", val_subs, val.satellite, model=model)
cal = verifier.calibrate(list(zip(dist, [s.truthful for s in val_subs])))
print(f"tau = {cal.tau:.4f}  (validation balanced accuracy {cal.balanced_accuracy:.3f})")

right = 0
subs = evalharness.evaluable(test)
for k, s in enumerate(subs):
    v = verifier.verify(model, cal, s, test.satellite)
    right += (v.decision == "TRUTHFUL") == s.truthful
    if k < 8:
        print(f"{s.id:28s} {v.decision:10s} distance {v.distance:.4f}")
print(f"... {right}/{len(subs)} held-out verdicts correct")
