"""Compare pixel MSE, feature MSE and the learned triplet metric on held-out parcels.

Uses the default benchmark world and training schedule but skips the robustness
ablation, so it takes about four minutes on a laptop CPU.

Run:  python demos/metric_vs_nominal.py
"""
from veriforet import evalharness

cfg = evalharness.config_from_dict({"evaluation": {"robustnessAblation": False}})
report = evalharness.run_experiment(cfg)

print(f"{'metric':8s}" + "".join(f"{a:>16s}" for a in evalharness.ATTACK_LABELS))
for metric, block in report["metrics"].items():
    row = [block["attacks"].get(a, {}).get("rocAuc") for a in evalharness.ATTACK_LABELS]
    print(f"{metric:8s}" + "".join(f"{v:16.3f}" if v is not None else f"{'-':>16s}" for v in row))

learned = report["metrics"]["learned"]
print(f"\ncalibrated tau {learned['tau']:.4f}, validation balanced accuracy "
      f"{learned['validationBalancedAccuracy']:.3f}")
print("evasion under verifier-targeted PGD:",
      round(report["robustness"]["withAdversarialNegatives"]["evasionRate"], 3))
