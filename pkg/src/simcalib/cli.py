"""Command-line entry point.

Subcommands operate on a bundle directory (``--out``):

* ``datagen``     - synthesize a CSBM bundle (graph, features, labels, masks)
* ``pretrain``    - train the GCN classifier and freeze hidden/logits
* ``calibrate``   - fit a calibrator per seed, report metrics before/after
* ``reliability`` - emit reliability tables and confidence histograms
* ``theory``      - run the Gaussian-model trial sweep and verdict

Configuration comes from built-in defaults, optionally overridden by a
JSON file (``--config``) and then by command-line flags.  Exit codes:
0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import rng
from .baselines import CagcnConfig, fit_cagcn, fit_ets, fit_ts, fit_vs
from .bundleio import (
    load_bundle,
    load_graph_and_inputs,
    read_meta,
    save_inputs,
    save_pretrain_outputs,
    write_meta,
)
from .calibrator import SimCalibConfig, grid_search, model_to_dict
from .classifier import GcnConfig, make_bundle, train_gcn
from .datagen import CsbmParams, gen_csbm
from .graph import normalized_adjacency
from .metrics import (
    compute_report,
    confidence_histogram,
    confidences,
    reliability,
    write_reliability_csv,
)
from .numerics import softmax_rows_np
from .theory import sweep, write_sweep_csv

__all__ = ["UsageError", "default_config", "load_config", "main"]

METHODS = ("uncal", "ts", "vs", "ets", "cagcn", "simcalib")
PAPER_POINT = {"d": 64, "n": 4, "a": 2.66, "b_norm": 0.0}
THEOREM_FREQ = 0.84


class UsageError(ValueError):
    """Bad arguments or configuration; maps to exit code 2."""


def default_config() -> dict:
    return {
        "seeds": [0],
        "metrics": {"num_bins": 15},
        "datagen": {f.name: getattr(CsbmParams(), f.name) for f in fields(CsbmParams)},
        "classifier": {
            "hidden_dim": 16,
            "learning_rate": 0.01,
            "weight_decay": 5e-4,
            "max_epochs": 300,
            "patience": 30,
            "early_stop": True,
            "overtrain_epochs": 2000,
        },
        "calibrate": {"method": "ts"},
        "simcalib": {
            "hidden_dim": 16,
            "num_heads": 2,
            "leaky_slope": 0.2,
            "temp_floor": 0.01,
            "ridge_scale": 1e-4,
            "learning_rate": 0.01,
            "weight_decay": 5e-4,
            "max_epochs": 2000,
            "patience": 100,
            "omega_grid": [0.6, 0.8, 0.9],
            "t_grid": [0.3, 0.5, 1.0],
            "include_self": True,
            "disable_feat": False,
            "disable_move": False,
            "disable_homophily": False,
            "disable_reldeg": False,
            "logits_as_sim": False,
        },
        "cagcn": {
            "hidden_dim": 16,
            "learning_rate": 0.01,
            "weight_decay": 5e-4,
            "max_epochs": 1000,
            "patience": 100,
            "temp_floor": 0.01,
        },
        "theory": {
            "points": [dict(PAPER_POINT)],
            "trials": 2000,
            "mc_samples": 20000,
            "seed": 0,
            "shared_labels": True,
            "sigma_aware": False,
        },
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    config = default_config()
    if path is not None:
        with open(path) as fh:
            config = _merge(config, json.load(fh))
    return config


def _resolve_config(args) -> dict:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config["seeds"] = [args.seed]
        config["datagen"]["seed"] = args.seed
        config["theory"]["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        config["calibrate"]["method"] = args.method
    return config


def _write_config_echo(out_dir: Path, config: dict) -> None:
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    params = CsbmParams(**config["datagen"])
    sample = gen_csbm(params)
    meta = {
        "num_nodes": params.num_nodes,
        "num_classes": params.num_classes,
        "feature_dim": params.feature_dim,
        "num_edges": sample.graph.num_edges,
        "seed": params.seed,
    }
    save_inputs(out_dir, sample.graph, sample.features, sample.labels, sample.masks, meta)
    _write_config_echo(out_dir, config)
    print(f"wrote bundle inputs to {out_dir} (N={params.num_nodes}, K={params.num_classes})")
    return 0


def cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    graph, features, labels, masks, meta = load_graph_and_inputs(out_dir)
    cc = config["classifier"]
    gcn_config = GcnConfig(
        hidden_dim=cc["hidden_dim"],
        learning_rate=cc["learning_rate"],
        weight_decay=cc["weight_decay"],
        max_epochs=cc["overtrain_epochs"] if args.overtrain else cc["max_epochs"],
        patience=cc["patience"],
        early_stop=False if args.overtrain else cc["early_stop"],
        seed=rng.derive_seed(config["datagen"]["seed"], "pretrain"),
    )
    params = train_gcn(features, graph, labels, masks, gcn_config, meta["num_classes"])
    bundle = make_bundle(params, features, graph, labels, masks)
    probs = softmax_rows_np(bundle.logits)
    num_bins = config["metrics"]["num_bins"]
    meta = dict(meta)
    meta["hidden_dim"] = gcn_config.hidden_dim
    meta["overtrained"] = bool(args.overtrain)
    for split in ("train", "val", "test"):
        report = compute_report(probs, labels, masks[split], num_bins)
        meta[f"{split}_accuracy"] = report.accuracy
        meta[f"{split}_ece"] = report.ece
    save_pretrain_outputs(out_dir, bundle.hidden, bundle.logits, meta)
    print(
        "pretrained classifier: "
        f"test acc {meta['test_accuracy']:.4f}, test ECE {meta['test_ece']:.4f}"
    )
    return 0


def _fit_and_apply(method: str, bundle, graph, config: dict, seed: int):
    """Fit one calibrator; returns (calibrated probs, model info dict)."""
    fit_idx = bundle.masks["val"]
    selection_idx = bundle.masks["train"]
    if method == "uncal":
        return softmax_rows_np(bundle.logits), {}
    if method == "ts":
        model = fit_ts(bundle, fit_idx)
        return model.apply(bundle.logits), {"temperature": model.temperature}
    if method == "vs":
        model = fit_vs(bundle, fit_idx)
        return model.apply(bundle.logits), {"scale": model.scale.tolist(), "bias": model.bias.tolist()}
    if method == "ets":
        model = fit_ets(bundle, fit_idx)
        return model.apply(bundle.logits), {
            "weights": model.weights.tolist(),
            "temperature": model.temperature,
        }
    if method == "cagcn":
        cagcn_config = CagcnConfig(seed=rng.derive_seed(seed, "cagcn"), **config["cagcn"])
        model = fit_cagcn(bundle, graph, fit_idx, cagcn_config, selection_idx)
        a_hat = normalized_adjacency(graph)
        return model.apply(bundle.logits, a_hat), {
            "w1": model.w1.tolist(),
            "b1": model.b1.tolist(),
            "w2": model.w2.tolist(),
            "b2": model.b2.tolist(),
        }
    if method == "simcalib":
        sc = dict(config["simcalib"])
        sc["omega_grid"] = tuple(sc["omega_grid"])
        sc["t_grid"] = tuple(sc["t_grid"])
        sim_config = SimCalibConfig(seed=rng.derive_seed(seed, "simcalib"), **sc)
        result = grid_search(bundle, graph, sim_config, fit_idx, selection_idx)
        info = {
            "omega": result.omega,
            "t": result.t_exponent,
            "selection_nll": result.selection_nll,
            "selection_ece": result.selection_ece,
            "grid": result.candidates,
            "model": model_to_dict(result.model),
        }
        return result.model.apply(bundle, graph), info
    raise UsageError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def _aggregate(per_seed: list, key: str) -> dict:
    metrics = {}
    for name in ("ece", "ace", "nll", "accuracy"):
        values = np.array([record[key][name] for record in per_seed], dtype=np.float64)
        metrics[name] = {"mean": float(values.mean()), "std": float(values.std())}
    return metrics


def cmd_calibrate(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    method = config["calibrate"]["method"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    graph, bundle, _ = load_bundle(out_dir)
    num_bins = config["metrics"]["num_bins"]
    test_idx = bundle.masks["test"]
    probs_before = softmax_rows_np(bundle.logits)
    report_before = compute_report(probs_before, bundle.labels, test_idx, num_bins)

    per_seed = []
    first_probs_after = None
    for seed in config["seeds"]:
        probs_after, info = _fit_and_apply(method, bundle, graph, config, seed)
        if first_probs_after is None:
            first_probs_after = probs_after
        report_after = compute_report(probs_after, bundle.labels, test_idx, num_bins)
        per_seed.append(
            {
                "seed": seed,
                "before": report_before.as_dict(),
                "after": report_after.as_dict(),
                "model_info": info,
            }
        )

    record = {
        "toolkit_version": __version__,
        "method": method,
        "seeds": list(config["seeds"]),
        "num_bins": num_bins,
        "config": config,
        "per_seed": per_seed,
        "aggregate": {"before": _aggregate(per_seed, "before"), "after": _aggregate(per_seed, "after")},
    }
    with open(out_dir / "results.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")

    _write_reliability_pair(out_dir, bundle, probs_before, first_probs_after, num_bins)
    agg = record["aggregate"]
    print(
        f"method={method} test ECE before {agg['before']['ece']['mean']:.4f} "
        f"-> after {agg['after']['ece']['mean']:.4f} (mean over {len(per_seed)} seed(s))"
    )
    return 0


def _write_reliability_pair(out_dir: Path, bundle, probs_before, probs_after, num_bins: int) -> None:
    test_idx = bundle.masks["test"]
    for tag, probs in (("pre", probs_before), ("post", probs_after)):
        conf, pred = confidences(probs[test_idx])
        correct = (pred == bundle.labels[test_idx]).astype(np.float64)
        write_reliability_csv(out_dir / f"reliability_{tag}.csv", reliability(conf, correct, num_bins))
        hist = confidence_histogram(conf, num_bins)
        with open(out_dir / f"confhist_{tag}.csv", "w") as fh:
            fh.write("bin,count\n")
            for m, count in enumerate(hist, start=1):
                fh.write(f"{m},{count}\n")


def cmd_reliability(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    method = config["calibrate"]["method"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    graph, bundle, _ = load_bundle(out_dir)
    num_bins = config["metrics"]["num_bins"]
    probs_before = softmax_rows_np(bundle.logits)
    probs_after, _ = _fit_and_apply(method, bundle, graph, config, config["seeds"][0])
    _write_reliability_pair(out_dir, bundle, probs_before, probs_after, num_bins)
    print(f"wrote reliability_{{pre,post}}.csv and confhist_{{pre,post}}.csv to {out_dir}")
    return 0


def cmd_theory(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = config["theory"]
    if not tc["points"]:
        raise UsageError("theory grid is empty")
    summaries = sweep(
        tc["points"],
        num_trials=tc["trials"],
        mc_samples=tc["mc_samples"],
        seed=tc["seed"],
        shared_labels=tc["shared_labels"],
        sigma_aware=tc["sigma_aware"],
    )
    write_sweep_csv(out_dir / "theory_summary.csv", summaries)
    anchor = next(
        (
            s
            for s in summaries
            if s.d == PAPER_POINT["d"]
            and s.n == PAPER_POINT["n"]
            and abs(abs(s.a) - PAPER_POINT["a"]) < 1e-9
            and s.b_norm == 0.0
        ),
        None,
    )
    if anchor is None:
        print("theorem check: anchor point (d=64, n=4, |a|=2.66, b=0) not in grid")
    else:
        verdict = "PASS" if anchor.freq_ece >= THEOREM_FREQ else "FAIL"
        print(
            f"theorem check at d=64, n=4, |a|=2.66: freq(ece_joint <= ece_separate) = "
            f"{anchor.freq_ece:.4f} (need >= {THEOREM_FREQ}) -> {verdict}"
        )
    print(f"wrote {out_dir / 'theory_summary.csv'} ({len(summaries)} row(s))")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simcalib", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config overriding defaults")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, required=True, help="bundle directory")

    p = sub.add_parser("datagen", help="synthesize a CSBM bundle")
    common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="train and freeze the classifier")
    common(p)
    p.add_argument("--overtrain", action="store_true", help="no early stop, long schedule")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("calibrate", help="fit a calibrator and report metrics")
    common(p)
    p.add_argument("--method", choices=METHODS, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reliability", help="emit reliability tables and histograms")
    common(p)
    p.add_argument("--method", choices=METHODS, default=None)
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("theory", help="Gaussian-model Monte Carlo sweep")
    common(p)
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
