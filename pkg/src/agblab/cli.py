"""Command-line surface: simulate, gen-data, train, eval, ablate, report.

One JSON config drives a run; flags override config keys. Exit codes:
0 ok, 1 I/O, 2 config, 3 missing artifact, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (build_dataset, read_dataset_csv, read_latent_sidecar,
                   split_stratified, write_dataset_csv, write_latent_sidecar)
from .errors import (AgblabError, ConfigError, MissingArtifact, NumericError)
from .experiment import ExperimentConfig, RunManifest
from .pipeline import (evaluate_model, load_model, save_model,
                       train_from_dataset)
from .process import write_trajectory_csv
from .training import TrainLog

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "lambda_", None) is not None:
        cfg.train = replace(cfg.train, lambda_=args.lambda_)
        cfg.lambda_grid = None
    if getattr(args, "backbone", None) is not None:
        cfg.network = replace(cfg.network, backbone=args.backbone)
    return cfg


def _outdir(cfg, args):
    out = cfg.resolved_output_dir(getattr(args, "out", None))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_split_dataset(cfg):
    dataset, truths = build_dataset(
        n_locations=cfg.data.n_locations, days=cfg.data.days,
        params=cfg.process, noise_std=cfg.data.noise_std, seed=cfg.seed,
        scenario=cfg.scenario, treatments=cfg.data.treatments,
        window=cfg.data.window, stride=cfg.data.stride)
    split_stratified(dataset, cfg.data.fractions, seed=cfg.seed)
    return dataset, truths


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    manifest = RunManifest(command="simulate", config_hash=cfg.config_hash(),
                           version=__version__)
    manifest.start(out / "manifest.json")
    _, truths = _build_split_dataset(cfg)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    finals = []
    for truth in truths:
        write_trajectory_csv(truth, traj_dir / f"{truth.location_id}.csv",
                             params=cfg.process)
        finals.append(truth.agb[-1])
    manifest.complete(out / "manifest.json", trajectories=str(traj_dir))
    print(f"simulate: {len(truths)} locations x {cfg.data.days} days; "
          f"final biomass {min(finals):.1f}..{max(finals):.1f} g/m2 -> {traj_dir}")
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    manifest = RunManifest(command="gen-data", config_hash=cfg.config_hash(),
                           version=__version__)
    manifest.start(out / "manifest.json")
    dataset, truths = _build_split_dataset(cfg)
    write_dataset_csv(dataset, out / "dataset.csv")
    write_latent_sidecar(truths, out / "latents.csv")
    manifest.dataset_hash = dataset.content_hash()
    manifest.complete(out / "manifest.json",
                      dataset=str(out / "dataset.csv"),
                      latents=str(out / "latents.csv"))
    counts = {}
    for loc in dataset.locations:
        counts[loc.split] = counts.get(loc.split, 0) + 1
    print(f"gen-data: {len(dataset.locations)} locations, splits {counts}, "
          f"hash {manifest.dataset_hash[:12]} -> {out / 'dataset.csv'}")
    return EXIT_OK


def _read_run_dataset(cfg, out):
    path = out / "dataset.csv"
    if not path.exists():
        raise MissingArtifact(f"expected artifact {path} (run gen-data first)")
    return read_dataset_csv(path, window=cfg.data.window, stride=cfg.data.stride)


def cmd_train(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    model_dir = out / args.tag
    manifest = RunManifest(command=f"train:{args.tag}",
                           config_hash=cfg.config_hash(), version=__version__)
    manifest.start(out / f"manifest_train_{args.tag}.json")
    dataset = _read_run_dataset(cfg, out)
    result = train_from_dataset(dataset, cfg)
    save_model(model_dir, result, cfg)
    if args.timing:
        result["log"].to_csv(model_dir / "train_log_timed.csv", timing=True)
    manifest.dataset_hash = dataset.content_hash()
    manifest.complete(out / f"manifest_train_{args.tag}.json",
                      checkpoint=str(model_dir / "checkpoint.csv"),
                      train_log=str(model_dir / "train_log.csv"))
    summary = result["log"].summary()
    print(f"train[{args.tag}]: lambda={result['lambda']} "
          f"best_val_rmse={summary['best_val_rmse']:.4f} g/m2 "
          f"at iter {summary['best_iteration']} "
          f"({summary['iterations']} iterations) -> {model_dir}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    dataset = _read_run_dataset(cfg, out)
    sidecar_path = out / "latents.csv"
    if not sidecar_path.exists():
        raise MissingArtifact(f"expected artifact {sidecar_path}")
    sidecar = read_latent_sidecar(sidecar_path)
    from .data import normalize
    normalize(dataset)
    store, net_cfg, meta = load_model(out / args.tag)
    baseline = None
    baseline_dir = out / args.baseline_tag
    if baseline_dir != out / args.tag and (baseline_dir / "checkpoint.csv").exists():
        baseline = load_model(baseline_dir)
    report = evaluate_model(dataset, sidecar, store, net_cfg, meta, cfg,
                            baseline=baseline, split=args.split)
    report.to_json(out / "eval_report.json")
    report.to_csv(out / "eval_report.csv")
    agb = report.metrics["agb"]
    line = (f"eval[{args.tag}|{report.model_kind}]: split={args.split} "
            f"rmse={agb['rmse_g_m2']:.3f} g/m2 ({agb['rmse_t_ha']:.4f} t/ha)")
    if "agb_vs_truth" in report.metrics:
        line += f" rmse_vs_truth={report.metrics['agb_vs_truth']['rmse_g_m2']:.3f}"
    if report.significance:
        s = report.significance[0]
        line += f" | {s.comparison}: W={s.w:.1f} p={s.p:.4g} (n={s.n})"
    print(line + f" -> {out / 'eval_report.json'}")
    return EXIT_OK


ABLATION_COLUMNS = [
    "backbone", "variant", "lambda", "n_params", "wall_to_best_s",
    "best_iteration", "rmse_test_g_m2", "rmse_shelter", "rmse_rainfed",
    "rmse_irrigated", "error",
]


def cmd_ablate(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    manifest = RunManifest(command="ablate", config_hash=cfg.config_hash(),
                           version=__version__)
    manifest.start(out / "manifest_ablate.json")
    dataset = _read_run_dataset(cfg, out)
    sidecar_path = out / "latents.csv"
    sidecar = read_latent_sidecar(sidecar_path) if sidecar_path.exists() else {}
    rows = []
    for kind in cfg.ablate.backbones:
        for variant, lam in (("original", 0.0), ("hybrid", cfg.ablate.hybrid_lambda)):
            row = {c: "" for c in ABLATION_COLUMNS}
            row.update(backbone=kind, variant=variant, lambda_=lam)
            try:
                rows.append(_ablate_cell(cfg, dataset, sidecar, kind, variant,
                                         lam, row))
            except (AgblabError, FloatingPointError) as err:
                row["error"] = str(err)
                rows.append(row)
    path = out / "ablation.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row.get("lambda_", "") if c == "lambda" else row.get(c, "")
                             for c in ABLATION_COLUMNS])
    manifest.complete(out / "manifest_ablate.json", ablation=str(path))
    print(f"ablate: {len(rows)} cells "
          f"({len(cfg.ablate.backbones)} backbones x 2 variants) -> {path}")
    return EXIT_OK


def _ablate_cell(cfg, dataset, sidecar, kind, variant, lam, row):
    from .evaluation import rmse as _rmse
    from .pipeline import meta_stats, predict_location

    cell_cfg = ExperimentConfig.from_dict({})
    cell_cfg.__dict__.update(cfg.__dict__)
    cell_cfg.network = replace(cfg.network, backbone=kind)
    cell_cfg.lambda_grid = None
    result = train_from_dataset(dataset, cell_cfg, lambda_override=lam)
    store, log, net_cfg = result["store"], result["log"], result["net_cfg"]
    row["n_params"] = store.n_parameters()
    row["wall_to_best_s"] = round(log.wall_ms_to_iteration(log.best_iteration) / 1000.0, 3)
    row["best_iteration"] = log.best_iteration
    stats = result["stats"]
    per_treatment = {}
    all_obs, all_pred = [], []
    for loc in dataset.split_locations("test"):
        series = predict_location(store, net_cfg, stats, loc,
                                  dataset.feature_names, cfg.data.window)
        per_treatment.setdefault(loc.treatment, ([], []))
        per_treatment[loc.treatment][0].append(loc.agb_obs)
        per_treatment[loc.treatment][1].append(series["agb"])
        all_obs.append(loc.agb_obs)
        all_pred.append(series["agb"])
    row["rmse_test_g_m2"] = round(_rmse(np.concatenate(all_obs),
                                        np.concatenate(all_pred)), 4)
    for treatment, (obs, pred) in per_treatment.items():
        row[f"rmse_{treatment}"] = round(_rmse(np.concatenate(obs),
                                               np.concatenate(pred)), 4)
    return row


def cmd_report(args):
    cfg = _load_config(args)
    out = _outdir(cfg, args)
    rows = []
    eval_path = out / "eval_report.json"
    if eval_path.exists():
        report = json.loads(eval_path.read_text(encoding="utf-8"))
        for group, values in sorted(report.get("metrics", {}).items()):
            variable, _, treatment = group.partition("/")
            for metric, value in sorted(values.items()):
                rows.append((metric, variable, treatment or "all", value))
        for name, rec in sorted(report.get("latent", {}).items()):
            rows.append(("rmspe_pct", name, "all", rec["rmspe_pct"]))
            if rec.get("cc") is not None:
                rows.append(("cc", name, "all", rec["cc"]))
    ablation_path = out / "ablation.csv"
    if ablation_path.exists():
        with open(ablation_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row.get("error"):
                    continue
                key = f"{row['backbone']}_{row['variant']}"
                for col in ("rmse_shelter", "rmse_rainfed", "rmse_irrigated"):
                    if row.get(col):
                        rows.append((f"ablate_rmse", key,
                                     col.removeprefix("rmse_"), row[col]))
    if not rows:
        raise MissingArtifact(
            f"no eval_report.json or ablation.csv under {out}")
    path = out / "report.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "variable", "treatment", "value"])
        writer.writerows(rows)
    print(f"report: {len(rows)} rows -> {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="agblab",
        description="Process-informed biomass modeling: simulate, train, evaluate.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="path to the experiment JSON config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("simulate", help="write ground-truth trajectory CSVs")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="write dataset.csv and latent sidecar")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on the run's dataset")
    common(p)
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="process-loss weight override (0 = ERM)")
    p.add_argument("--tag", default="model", help="model subdirectory name")
    p.add_argument("--timing", action="store_true",
                   help="also write a wall-clock train log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model")
    common(p)
    p.add_argument("--tag", default="model")
    p.add_argument("--baseline-tag", default="erm",
                   help="compare against this model when present")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="backbone x {original, hybrid} table")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="flatten artifacts to plot-ready CSV")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as err:
        print(f"missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except AgblabError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
