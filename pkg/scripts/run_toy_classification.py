#!/usr/bin/env python3
"""Toy classification federation: trend study over seeds.

For each seed this runs the full offline-distillation pipeline at alpha=1
(attention bounds on and off, full and 10% public data), the alpha=0.1
federation, and the FedAvg baseline at both alphas, then prints the trend
table: central vs standalone accuracy, bound ablation, public-size ablation,
non-IID degradation, and the bandwidth comparison.

Usage: python scripts/run_toy_classification.py [--seeds 0 1 2] [--out DIR] [--quick]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from fedad.config import ExperimentConfig
from fedad.federation import FedADRun, fedavg_baseline


HARD_GENERATOR = {
    "num_classes": 10,
    "image_size": 28,
    "noise": 0.32,
    "distractor_prob": 1.0,
    "jitter": 3,
    "patch_intensity": [0.45, 0.80],
    "distractor_intensity": [0.30, 0.60],
}


def classification_doc(out_dir, seed, alpha=1.0, quick=False, **distill_overrides):
    scale = 0.2 if quick else 1.0
    distill = {
        "student_architecture": "cnn-small",
        "epochs": 10,
        "batch_size": 64,
        "optimizer": "sgd-cosine",
        "lr": 1e-2,
        "lr_end": 1e-3,
        "tau": 3.0,
        "use_lower": True,
        "use_upper": True,
        "normalized_bounds": True,
    }
    distill.update(distill_overrides)
    return {
        "name": f"toy-cls-seed{seed}-a{alpha}",
        "task": "classification",
        "seed": seed,
        "out_dir": str(Path(out_dir) / f"seed{seed}-alpha{alpha}"),
        "dataset": {"kind": "synthetic-classification", "num_samples": int(10000 * scale),
                    "seed": 100 + seed, **HARD_GENERATOR},
        "public_dataset": {"kind": "synthetic-classification", "num_samples": int(2000 * scale),
                           "seed": 200 + seed, **HARD_GENERATOR},
        "test_dataset": {"kind": "synthetic-classification", "num_samples": int(2000 * scale),
                         "seed": 300 + seed, **HARD_GENERATOR},
        "partition": {"num_nodes": 3, "alpha": alpha, "seed": 400 + seed, "holdout_fraction": 0.1},
        "node_defaults": {"architecture": "cnn-small", "epochs": 4, "batch_size": 64,
                          "optimizer": "sgd-cosine", "lr": 2e-2, "lr_end": 1e-4},
        "distill": distill,
        "fedavg": {"rounds": 5, "local_epochs": 1},
    }


def run_seed(out_dir, seed, quick=False):
    results = {}
    t0 = time.time()

    doc = classification_doc(out_dir, seed, alpha=1.0, quick=quick)
    report = FedADRun(ExperimentConfig.from_dict(doc)).run_all()
    results["fedad"] = report["metrics"]["central"]["accuracy"]
    results["standalone_mean"] = report["metrics"]["standalone_mean"]["accuracy"]
    results["fedad_bytes"] = report["bandwidth"]["total_bytes"]

    # ablation: attention bounds off (teachers/products reused via stage hashes)
    doc_off = classification_doc(out_dir, seed, alpha=1.0, quick=quick,
                                 use_lower=False, use_upper=False)
    report_off = FedADRun(ExperimentConfig.from_dict(doc_off)).run_all()
    results["fedad_no_bounds"] = report_off["metrics"]["central"]["accuracy"]

    # ablation: 10% public data
    doc_small = classification_doc(out_dir, seed, alpha=1.0, quick=quick, public_subset=0.1)
    report_small = FedADRun(ExperimentConfig.from_dict(doc_small)).run_all()
    results["fedad_small_public"] = report_small["metrics"]["central"]["accuracy"]

    # non-IID federation
    doc_01 = classification_doc(out_dir, seed, alpha=0.1, quick=quick)
    report_01 = FedADRun(ExperimentConfig.from_dict(doc_01)).run_all()
    results["fedad_alpha01"] = report_01["metrics"]["central"]["accuracy"]

    # FedAvg baseline at both alphas
    _, ledger, fed_report = fedavg_baseline(ExperimentConfig.from_dict(doc))
    results["fedavg"] = fed_report["metrics"]["accuracy"]
    results["fedavg_bytes"] = ledger.total_bytes()
    _, _, fed_report_01 = fedavg_baseline(ExperimentConfig.from_dict(doc_01))
    results["fedavg_alpha01"] = fed_report_01["metrics"]["accuracy"]

    results["elapsed_s"] = round(time.time() - t0, 1)
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/toy-classification")
    parser.add_argument("--quick", action="store_true", help="5x smaller datasets")
    args = parser.parse_args()

    all_results = {}
    for seed in args.seeds:
        print(f"--- seed {seed} ---")
        res = run_seed(args.out, seed, quick=args.quick)
        all_results[seed] = res
        for key, value in res.items():
            print(f"  {key}: {value}")

    def avg(key):
        return float(np.mean([all_results[s][key] for s in args.seeds]))

    print("\n=== seed averages ===")
    for key in ("fedad", "standalone_mean", "fedad_no_bounds", "fedad_small_public",
                "fedad_alpha01", "fedavg", "fedavg_alpha01"):
        print(f"  {key}: {avg(key):.4f}")
    print(f"  fedad bytes: {avg('fedad_bytes'):.0f}  fedavg bytes: {avg('fedavg_bytes'):.0f}")
    print("\n=== trends ===")
    print(f"  central >= standalone mean: {avg('fedad') >= avg('standalone_mean')}")
    print(f"  bounds on > off (avg):      {avg('fedad') > avg('fedad_no_bounds')}")
    print(f"  full public >= 10%:         {avg('fedad') >= avg('fedad_small_public')}")
    print(f"  alpha 0.1 <= alpha 1 (AD):  {avg('fedad_alpha01') <= avg('fedad')}")
    print(f"  alpha 0.1 <= alpha 1 (Avg): {avg('fedavg_alpha01') <= avg('fedavg')}")
    print(f"  fedad bytes < fedavg bytes: {avg('fedad_bytes') < avg('fedavg_bytes')}")

    out = Path(args.out) / "summary.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(all_results, indent=2))
    print(f"\nwrote {out}")


if __name__ == "__main__":
    main()
