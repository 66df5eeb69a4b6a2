"""Glue between dataset, training, and evaluation used by the CLI commands.

Everything here is a pure function of its inputs (given the seeds inside the
configs), so re-running any stage on the same artifacts reproduces them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore
from .backbone import NetworkConfig, forward, init_network
from .data import apply_normalization, normalize
from .errors import MissingArtifact
from .evaluation import (EvalReport, SignificanceEntry, cc, latent_recovery,
                         mae, r2, rmse, wilcoxon_signed_rank)
from .process import LatentState, g_m2_to_t_ha, simulate
from .training import GridSearchResult, fit, grid_search_lambda

CHANNEL_NAMES = ("agb", "lai", "par", "rue", "fw")


def prepare_sets(dataset):
    """Normalize in place (train-split stats) and materialize all splits."""
    normalize(dataset)
    sets = {name: dataset.samples(split=name) for name in ("train", "val", "test")}
    return sets, dataset.norm_stats


def network_config_for(dataset_stats, base):
    """Fix the biomass head scale from the train-split target spread."""
    scale = max(float(dataset_stats.target_std), 1.0)
    return replace(base, agb_scale=scale)


def train_from_dataset(dataset, exp_cfg, lambda_override=None):
    """Train one model per the experiment config; returns a result dict.

    If the config carries a lambda grid (and no explicit override), the grid
    search picks the weight by validation RMSE.
    """
    sets, stats = prepare_sets(dataset)
    net_cfg = network_config_for(stats, exp_cfg.network)
    init = init_network(net_cfg, exp_cfg.seed)
    grid_entries = None
    if lambda_override is None and exp_cfg.lambda_grid:
        result = grid_search_lambda(exp_cfg.lambda_grid, init, sets["train"],
                                    sets["val"], net_cfg, exp_cfg.process,
                                    exp_cfg.train)
        store, log = result.best_store, result.best_log
        lambda_ = result.best_lambda
        grid_entries = [
            {"lambda": e.lambda_, "val_rmse": e.val_rmse, "error": e.error}
            for e in result.entries
        ]
    else:
        lambda_ = exp_cfg.train.lambda_ if lambda_override is None else lambda_override
        cfg = replace(exp_cfg.train, lambda_=lambda_)
        store, log = fit(init, sets["train"], sets["val"], net_cfg,
                         exp_cfg.process, cfg)
    return {
        "store": store,
        "log": log,
        "net_cfg": net_cfg,
        "stats": stats,
        "lambda": lambda_,
        "grid": grid_entries,
        "sets": sets,
    }


def model_kind(lambda_):
    return "erm" if lambda_ == 0.0 else "hybrid"


def save_model(outdir, result, exp_cfg):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    result["store"].save(outdir / "checkpoint.csv")
    meta = {
        "lambda": result["lambda"],
        "model_kind": model_kind(result["lambda"]),
        "network": asdict(result["net_cfg"]),
        "norm": result["stats"].to_dict(),
        "process": asdict(exp_cfg.process),
        "initial_agb": exp_cfg.scenario.initial_agb,
        "window": exp_cfg.data.window,
        "grid": result["grid"],
    }
    (outdir / "model_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n",
        encoding="utf-8")
    result["log"].to_csv(outdir / "train_log.csv")
    (outdir / "train_log.json").write_text(
        json.dumps(result["log"].summary(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def load_model(model_dir):
    model_dir = Path(model_dir)
    checkpoint = model_dir / "checkpoint.csv"
    meta_path = model_dir / "model_meta.json"
    for p in (checkpoint, meta_path):
        if not p.exists():
            raise MissingArtifact(f"expected artifact {p}")
    store = ParameterStore.load(checkpoint)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    net_raw = dict(meta["network"])
    net_raw["hidden"] = tuple(net_raw["hidden"])
    net_raw["features"] = tuple(net_raw["features"])
    net_raw["rue_bounds"] = tuple(net_raw["rue_bounds"])
    net_cfg = NetworkConfig(**net_raw)
    return store, net_cfg, meta


def predict_location(store, net_cfg, stats, loc, feature_names, window):
    """Stitch full-season per-day predictions from non-overlapping windows.

    The final window is aligned to the season end; where windows overlap the
    earlier window's values win. Returns one (days,) array per channel.
    """
    from .data import location_features

    feats = apply_normalization(location_features(loc, feature_names), stats)
    t_total = loc.days
    starts = list(range(0, t_total - window + 1, window))
    if starts[-1] != t_total - window:
        starts.append(t_total - window)
    x = np.stack([feats[s:s + window] for s in starts])
    arrays = forward(store, x, net_cfg, mode="infer").arrays()
    series = {ch: np.full(t_total, np.nan) for ch in CHANNEL_NAMES}
    for i, s in enumerate(starts):
        for ch in CHANNEL_NAMES:
            segment = series[ch][s:s + window]
            fill = np.isnan(segment)
            segment[fill] = arrays[ch][i][fill]
    return series


def replay_truth_agb(latents, initial_agb, params):
    """Reconstruct noise-free biomass by replaying the simulator on
    ground-truth latent series."""
    states = [LatentState(lai=float(l), par=float(p), rue=float(r), fw=float(f))
              for l, p, r, f in zip(latents["lai"], latents["par"],
                                    latents["rue"], latents["fw"])]
    return simulate(initial_agb, states, params).agb


def _metric_block(y, y_hat):
    block = {
        "rmse_g_m2": rmse(y, y_hat),
        "rmse_t_ha": float(g_m2_to_t_ha(rmse(y, y_hat))),
        "mae_g_m2": mae(y, y_hat),
    }
    try:
        block["r2"] = r2(y, y_hat)
        block["cc"] = cc(y, y_hat)
    except Exception:
        pass
    return block


def evaluate_model(dataset, sidecar, store, net_cfg, meta, exp_cfg,
                   baseline=None, split="test"):
    """Score a trained model on one split of the dataset.

    Produces biomass metrics against the noisy observations and against the
    simulator replay of the ground-truth latents, unsupervised latent
    recovery, per-location drought-day counts, and (when a baseline model is
    given) a paired Wilcoxon significance entry on per-location MAE.
    """
    stats = meta_stats(meta)
    params = exp_cfg.process
    threshold = exp_cfg.eval.drought_threshold
    window = meta.get("window", exp_cfg.data.window)
    locations = dataset.split_locations(split)
    if not locations:
        raise MissingArtifact(f"dataset has no locations in split {split!r}")

    report = EvalReport(model_kind=meta.get("model_kind", "hybrid"))
    report.notes.append(f"split={split}, n_locations={len(locations)}")

    obs_all, pred_all, truth_all = [], [], []
    by_treatment = {}
    per_loc_mae = {}
    pred_latent = {name: {} for name in ("lai", "par", "rue", "fw")}
    true_latent = {name: {} for name in ("lai", "par", "rue", "fw")}

    for loc in locations:
        series = predict_location(store, net_cfg, stats, loc,
                                  dataset.feature_names, window)
        truth_agb = None
        if loc.location_id in sidecar:
            latents = sidecar[loc.location_id]
            truth_agb = replay_truth_agb(latents, meta.get("initial_agb", 1.0),
                                         params)[:loc.days]
            for name in pred_latent:
                pred_latent[name][loc.location_id] = series[name]
                true_latent[name][loc.location_id] = latents[name]
        obs_all.append(loc.agb_obs)
        pred_all.append(series["agb"])
        if truth_agb is not None:
            truth_all.append(truth_agb)
        group = by_treatment.setdefault(loc.treatment, ([], [], []))
        group[0].append(loc.agb_obs)
        group[1].append(series["agb"])
        if truth_agb is not None:
            group[2].append(truth_agb)
        per_loc_mae[loc.location_id] = mae(loc.agb_obs, series["agb"])

    obs = np.concatenate(obs_all)
    pred = np.concatenate(pred_all)
    report.metrics["agb"] = _metric_block(obs, pred)
    if truth_all:
        truth = np.concatenate(truth_all)
        report.metrics["agb_vs_truth"] = _metric_block(truth, pred)
    for treatment, (o, p, t) in sorted(by_treatment.items()):
        report.metrics[f"agb/{treatment}"] = _metric_block(
            np.concatenate(o), np.concatenate(p))
        if t:
            report.metrics[f"agb_vs_truth/{treatment}"] = _metric_block(
                np.concatenate(t), np.concatenate(p))

    if any(true_latent["fw"]):
        recovery, drought = latent_recovery(pred_latent, true_latent, threshold)
        report.latent = recovery
        report.drought = {
            loc: counts for loc, counts in sorted(drought.items())
        }
        rel_errs = []
        for counts in drought.values():
            denom = max(counts["truth"], 1)
            rel_errs.append(abs(counts["pred"] - counts["truth"]) / denom)
        if rel_errs:
            report.metrics["drought_days"] = {
                "median_rel_err": float(np.median(rel_errs)),
                "n_locations": len(rel_errs),
            }

    if baseline is not None:
        base_store, base_cfg, base_meta = baseline
        base_stats = meta_stats(base_meta)
        base_mae = {}
        for loc in locations:
            series = predict_location(base_store, base_cfg, base_stats, loc,
                                      dataset.feature_names,
                                      base_meta.get("window", window))
            base_mae[loc.location_id] = mae(loc.agb_obs, series["agb"])
        a = [per_loc_mae[k] for k in sorted(per_loc_mae)]
        b = [base_mae[k] for k in sorted(base_mae)]
        result = wilcoxon_signed_rank(a, b)
        report.significance.append(SignificanceEntry(
            comparison=f"{report.model_kind}_vs_{base_meta.get('model_kind', 'baseline')}",
            w=result.w, p=result.p, n=result.n_effective, method=result.method))
    return report


def meta_stats(meta):
    from .data import NormStats

    return NormStats.from_dict(meta["norm"])
