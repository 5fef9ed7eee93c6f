"""Command-line entry point: ``veriforet <subcommand>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, baselines, evalharness, metriclearn, nnet, raster, scenesim
from .dataset import Submission, load_dataset, manifest_hash, save_dataset
from .rng import derive
from .verifier import Calibration, MissingTileError, calibrate, verify

EXIT_TRUTHFUL, EXIT_UNTRUTHFUL, EXIT_ERROR = 0, 1, 2


def _config(path):
    return evalharness.load_config(path)


def cmd_gen_data(args):
    cfg = _config(args.config)
    world = scenesim.generate_world(cfg.world)
    ds = scenesim.build_dataset(world, cfg.capture_seed)
    print(save_dataset(ds, args.out))


def cmd_attack(args):
    ds = load_dataset(args.data)
    types = tuple(t.strip() for t in args.types.split(",") if t.strip())
    regressor = None
    if {"adv", "combined"} & set(types):
        cfg = _config(args.config) if args.config else None
        rcfg = cfg.regressor if cfg else attacks.RegressorConfig(seed=derive(ds.config.seed, 2))
        regressor = attacks.train_cover_regressor(ds, rcfg)
        nnet.save_weights(regressor, Path(args.out) / "regressor.vfw")
    pgd = attacks.PGDParams(args.epsilon, args.step_size, args.steps)
    out = attacks.generate_attacks(ds, types, regressor, pgd)
    print(save_dataset(out, args.out))


def _split_datasets(ds, split):
    parcels = evalharness.split_parcels(ds.grid_size, split)
    return parcels, {name: ds.subset(p) for name, p in parcels.items()}


def cmd_train(args):
    cfg = _config(args.config)
    ds = load_dataset(args.data)
    parcels, parts = _split_datasets(ds, cfg.split)
    model = metriclearn.train_metric(parts["train"], parts["validation"], cfg.metric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nnet.save_weights(model, out / "weights.vfw")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "trainLoss", "valMargin"])
        for h in model.history:
            w.writerow([h["epoch"], repr(h["trainLoss"]), repr(h["valMargin"])])
    run = {"config": cfg.to_dict(), "manifestHash": manifest_hash(args.data),
           "splits": {k: [list(p) for p in v] for k, v in parcels.items()}, "result": model.meta}
    (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=1) + "\n")


def _load_model(model_dir):
    return nnet.load_weights(Path(model_dir) / "weights.vfw", nnet.EmbeddingModel)


def cmd_calibrate(args):
    model = _load_model(args.model)
    run = json.loads((Path(args.model) / "run.json").read_text())
    ds = load_dataset(args.data)
    val = ds.subset([tuple(p) for p in run["splits"]["validation"]])
    subs = evalharness.evaluable(val)
    d = evalharness.metric_distances("learned", subs, val.satellite, model=model)
    cal = calibrate(list(zip(d, [s.truthful for s in subs])), dataset_hash=manifest_hash(args.data))
    Path(args.out).write_text(cal.to_json())


def cmd_verify(args):
    model = _load_model(args.model)
    cal = Calibration.from_json(Path(args.calibration).read_text())
    i, j = (int(v) for v in args.parcel.split(","))
    man = json.loads((Path(args.data) / "manifest.json").read_text())
    tiles = {(r["parcel"][0], r["parcel"][1], r["t"]): r["file"] for r in man["satellite"]}
    key = (i, j, args.time)
    store = {key: raster.read_png(Path(args.data) / tiles[key])} if key in tiles else {}
    sub = Submission(Path(args.submission).stem, raster.read_png(args.submission), (i, j), args.time, "unknown", float("nan"))
    verdict = verify(model, cal, sub, store)
    print(verdict.to_json())
    return EXIT_TRUTHFUL if verdict.decision == "TRUTHFUL" else EXIT_UNTRUTHFUL


def cmd_evaluate(args):
    cfg = _config(args.config)
    art = {}
    report = evalharness.run_experiment(cfg, art)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(evalharness.report_bytes(report))
    stem = out.with_suffix("")
    evalharness.write_histograms_csv(report, f"{stem}.histograms.csv")
    subs = art["test_subs"]
    fx = art["feature_extractor"]
    feats = fx.features(np.stack([nnet.prepare(s.image) for s in subs]))
    baselines.write_projection_csv(f"{stem}.projection.csv", [s.id for s in subs], [s.label for s in subs],
                                   baselines.project2d(feats))
    models = out.parent / f"{stem.name}.models"
    for name in ("model", "ablation", "regressor", "feature_extractor"):
        if art.get(name) is not None:
            nnet.save_weights(art[name], models / f"{name}.vfw")
    timings = {k: round(v, 3) for k, v in art["timings"].items()}
    Path(f"{stem}.timings.json").write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")
    summary = {m: {a: round(v["rocAuc"], 4) for a, v in b["attacks"].items()} for m, b in report["metrics"].items()}
    print(json.dumps(summary, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="veriforet", description="Verify reported drone imagery against satellite tiles.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded world and its truthful dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("attack", help="add attack-vector submissions to a dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--types", default="loc,time,adv,combined")
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--epsilon", type=float, default=8 / 255)
    a.add_argument("--step-size", type=float, default=2 / 255)
    a.add_argument("--steps", type=int, default=20)
    a.set_defaults(func=cmd_attack)

    t = sub.add_parser("train", help="train the embedding metric")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="choose the distance threshold on the validation split")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("verify", help="verify one submission; exit 0 truthful, 1 untruthful, 2 error")
    v.add_argument("--model", required=True)
    v.add_argument("--calibration", required=True)
    v.add_argument("--submission", required=True)
    v.add_argument("--parcel", required=True, help="i,j")
    v.add_argument("--time", type=int, required=True)
    v.add_argument("--data", required=True)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("evaluate", help="run the full experiment and write the report")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        code = args.func(args)
    except (MissingTileError, ValueError, OSError, KeyError, RuntimeError) as err:
        print(f"veriforet {args.command}: {err}", file=sys.stderr)
        return EXIT_ERROR
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
