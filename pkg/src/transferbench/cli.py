"""Command-line driver.

Subcommands: train, advtrain, lgv, attack, evaluate, grid, tune, report.
Global flags: --config <file>, --seed <int>, --out <dir>, --jobs <int>.
The JSON config schema (keys dataset / models / victims / attack / grid /
tune / lgv) is documented in README.md with a full example.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .attack import AttackSpec, run_attack
from .harness.dataset import gen_dataset, split_dataset
from .harness.grid import Combination, grid_search
from .harness.report import ReportRecord, read_csv, report
from .harness.tuning import tune_hyperparams
from .harness.victims import (VictimEntry, VictimRegistry, evaluate,
                              select_benign, validate_entry)
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, adversarial_train, collect_lgv, train


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _dataset(cfg: dict, seed_override=None):
    d = cfg.get("dataset", {})
    seed = seed_override if seed_override is not None else d.get("seed", 7)
    data = gen_dataset(seed=seed, n=d.get("n", 1536), classes=d.get("classes", 8),
                       canvas_size=d.get("canvas", 40))
    splits = split_dataset(data, d.get("train_fraction", 0.75))
    test = {"images": splits["test_x"], "labels": splits["test_y"]}
    return data, splits, test


def _model_spec(entry: dict) -> ModelSpec:
    return ModelSpec(entry["arch"], width=entry.get("width", 16),
                     depth=entry.get("depth", 3),
                     input_size=entry.get("input_size", 32),
                     num_classes=entry.get("num_classes", 8))


def _checkpoint_path(out, name):
    return os.path.join(out, f"{name}.tabx")


def _registry(cfg, out) -> VictimRegistry:
    path = os.path.join(out, "victims.json")
    if os.path.exists(path):
        return VictimRegistry.load(path)
    reg = VictimRegistry()
    canvas = cfg.get("dataset", {}).get("canvas", 40)
    for v in cfg.get("victims", []):
        model_name = v.get("model", v["name"])
        entry = VictimEntry(name=v["name"],
                            checkpoint_path=_checkpoint_path(out, model_name),
                            pipeline=tuple(v.get("pipeline", ())),
                            input_size=v.get("input_size", 32))
        validate_entry(entry, canvas)
        reg.add(entry)
    reg.save(path)
    return reg


def cmd_train(cfg, out, seed, jobs, adversarial_only=False):
    _, splits, _ = _dataset(cfg, seed)
    trained = []
    for entry in cfg.get("models", []):
        tc = TrainConfig.from_json(entry.get("train", {}))
        if adversarial_only and tc.adversarial is None:
            continue
        spec = _model_spec(entry)
        model = adversarial_train(spec, splits, tc) if tc.adversarial is not None \
            else train(spec, splits, tc)
        path = _checkpoint_path(out, entry["name"])
        save_checkpoint(model, path)
        trained.append(entry["name"])
        print(f"trained {entry['name']}: clean acc "
              f"{model.meta['clean_test_acc']:.3f} -> {path}")
    if adversarial_only and not trained:
        raise SystemExit("no model entry has an adversarial training config")
    _registry(cfg, out)


def cmd_lgv(cfg, out, seed, jobs):
    _, splits, _ = _dataset(cfg, seed)
    lg = cfg.get("lgv", {})
    base_name = lg["base"]
    base = load_checkpoint(_checkpoint_path(out, base_name))
    tc = TrainConfig.from_json(lg.get("train", {}))
    tc = replace(tc, lgv_high_lr=lg.get("high_lr", tc.lgv_high_lr),
                 lgv_snapshots=lg.get("snapshots", tc.lgv_snapshots),
                 lgv_interval=lg.get("interval", tc.lgv_interval))
    snaps = collect_lgv(base, splits, tc)
    for i, snap in enumerate(snaps):
        path = _checkpoint_path(out, f"{base_name}_lgv{i}")
        save_checkpoint(snap, path)
        print(f"snapshot {i} -> {path}")


def _attack_setup(cfg, out, seed):
    _, _, test = _dataset(cfg, seed)
    registry = _registry(cfg, out)
    atk = cfg.get("attack", {})
    spec = AttackSpec.from_json(atk)
    if seed is not None:
        spec = replace(spec, seed=seed)
    n = atk.get("n_examples", 256)
    benign = select_benign(test, registry, n, spec.seed)
    return registry, atk, spec, benign


def cmd_attack(cfg, out, seed, jobs):
    registry, atk, spec, benign = _attack_setup(cfg, out, seed)
    subs = atk["substitute"]
    names = subs if isinstance(subs, list) else [subs]
    models = [load_checkpoint(_checkpoint_path(out, s)) for s in names]
    x_adv, trace = run_attack(models if len(models) > 1 else models[0],
                              benign["images"], benign["labels"], spec,
                              record_deltas=False)
    np.savez(os.path.join(out, "adv.npz"), x_adv=x_adv, x=benign["images"],
             labels=benign["labels"], indices=np.asarray(benign["indices"]))
    trace.to_csv(os.path.join(out, "trace.csv"))
    with open(os.path.join(out, "attack_spec.json"), "w") as fh:
        json.dump({"spec": spec.to_json(), "substitute": "+".join(names),
                   "n_examples": len(benign["labels"])}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    print(f"attacked {len(benign['labels'])} examples -> {out}/adv.npz")


def backend_name(spec: AttackSpec) -> str:
    augs = tuple(k for k in spec.stack.kinds if k in ("UN", "DP", "DI2", "TI"))
    scale = next((k for k in spec.stack.kinds if k in ("SI", "ADMIX")), None)
    opt = None if spec.optimizer == "plain" else spec.optimizer
    return Combination(spec.init, opt, augs, scale).name


def cmd_evaluate(cfg, out, seed, jobs):
    registry = _registry(cfg, out)
    blob = np.load(os.path.join(out, "adv.npz"))
    with open(os.path.join(out, "attack_spec.json")) as fh:
        meta = json.load(fh)
    spec = AttackSpec.from_json(meta["spec"])
    row = evaluate(blob["x_adv"], blob["labels"], meta["substitute"], registry)
    records = []
    for victim, acc in sorted(row.items()):
        if acc is None:
            continue
        records.append(ReportRecord(
            substitute=meta["substitute"], victim=victim,
            method=spec.method.kind if spec.method else "none",
            backend=backend_name(spec), norm=spec.norm, epsilon=spec.epsilon,
            iterations=spec.iterations, seed=spec.seed,
            n_examples=int(meta["n_examples"]), accuracy=acc))
    path = os.path.join(out, "records.json")
    with open(path, "w") as fh:
        json.dump([r.__dict__ for r in records], fh, indent=2, sort_keys=True)
        fh.write("\n")
    for r in records:
        print(f"{r.victim}: {r.accuracy:.4f}")
    print(f"records -> {path}")


def cmd_grid(cfg, out, seed, jobs):
    registry = _registry(cfg, out)
    _, _, test = _dataset(cfg, seed)
    g = cfg.get("grid", {})
    base = AttackSpec.from_json(g.get("base", {}))
    if seed is not None:
        base = replace(base, seed=seed)
    benign = select_benign(test, registry, g.get("n_examples", 64), base.seed)
    sub_names = g.get("substitutes") or registry.names
    substitutes = {s: load_checkpoint(_checkpoint_path(out, s)) for s in sub_names}
    result = grid_search(base, substitutes, registry, benign,
                         budget=g.get("budget"), jobs=jobs)
    records = []
    for (combo_name, sub), row in sorted(result.cells.items()):
        for victim, acc in sorted(row.items()):
            if acc is None:
                continue
            records.append(ReportRecord(
                substitute=sub, victim=victim, method="none",
                backend=combo_name, norm=base.norm, epsilon=base.epsilon,
                iterations=base.iterations, seed=base.seed,
                n_examples=len(benign["labels"]), accuracy=acc))
    paths = report(records, out)
    with open(os.path.join(out, "ranking.json"), "w") as fh:
        json.dump({"truncated": result.truncated, "ranking": result.ranking},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    best = result.ranking[0] if result.ranking else None
    if best:
        print(f"best combination: {best['name']} (AAA {best['AAA']:.4f})")
    print(f"results -> {paths['csv']}" + ("  [truncated]" if result.truncated else ""))


def cmd_tune(cfg, out, seed, jobs):
    registry = _registry(cfg, out)
    _, _, test = _dataset(cfg, seed)
    t = cfg.get("tune", {})
    base = AttackSpec.from_json(t.get("base", {}))
    if seed is not None:
        base = replace(base, seed=seed)
    n_val = t.get("n_validation", 64)
    n_test = t.get("n_examples", 256)
    pool = select_benign(test, registry, n_test + n_val, base.seed)
    validation = {"images": pool["images"][n_test:],
                  "labels": pool["labels"][n_test:],
                  "indices": pool["indices"][n_test:]}
    sub_name = t["substitute"]
    model = load_checkpoint(_checkpoint_path(out, sub_name))
    best = tune_hyperparams(t["method"], sub_name, model, validation,
                            t["search"], registry=registry, attack_base=base,
                            test_indices=pool["indices"][:n_test])
    path = os.path.join(out, "tuned.json")
    with open(path, "w") as fh:
        json.dump(best.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"best params -> {path}: {best.to_json()}")


def cmd_report(cfg, out, seed, jobs, records_path=None, plots=False):
    path = records_path or os.path.join(out, "records.json")
    with open(path) as fh:
        records = [ReportRecord.from_json(o) for o in json.load(fh)]
    paths = report(records, out, plots=plots)
    print(f"wrote {paths['csv']}, {paths['json']}, {paths['summary']}"
          + (f", {paths['plot']}" if "plot" in paths else ""))


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="transferbench",
        description="Desk-scale benchmark for transfer-based adversarial attacks")
    parser.add_argument("--config", default="config.json")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="out")
    parser.add_argument("--jobs", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "advtrain", "lgv", "attack", "evaluate", "grid", "tune"):
        sub.add_parser(name)
    rep = sub.add_parser("report")
    rep.add_argument("--records", default=None)
    rep.add_argument("--plots", action="store_true")

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)

    if args.command == "train":
        cmd_train(cfg, args.out, args.seed, args.jobs)
    elif args.command == "advtrain":
        cmd_train(cfg, args.out, args.seed, args.jobs, adversarial_only=True)
    elif args.command == "lgv":
        cmd_lgv(cfg, args.out, args.seed, args.jobs)
    elif args.command == "attack":
        cmd_attack(cfg, args.out, args.seed, args.jobs)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.out, args.seed, args.jobs)
    elif args.command == "grid":
        cmd_grid(cfg, args.out, args.seed, args.jobs)
    elif args.command == "tune":
        cmd_tune(cfg, args.out, args.seed, args.jobs)
    elif args.command == "report":
        cmd_report(cfg, args.out, args.seed, args.jobs,
                   records_path=args.records, plots=args.plots)
    return 0


if __name__ == "__main__":
    sys.exit(main())
