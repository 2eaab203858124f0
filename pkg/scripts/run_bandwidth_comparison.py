#!/usr/bin/env python3
"""Bandwidth accounting: one-shot distillation vs parameter-averaging rounds.

Runs the toy classification federation once, runs the FedAvg baseline over a
configurable number of rounds on the same partition, and prints the ledger
comparison (per-method totals, direction split, asynchrony).

Usage: python scripts/run_bandwidth_comparison.py [--rounds 5] [--out DIR]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from run_toy_classification import classification_doc

from fedad.config import ExperimentConfig
from fedad.federation import BandwidthLedger, FedADRun, bandwidth_report, fedavg_baseline


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/bandwidth")
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()

    doc = classification_doc(args.out, args.seed, alpha=1.0, quick=args.quick)
    exp = ExperimentConfig.from_dict(doc)
    run = FedADRun(exp)
    run.run_all()
    fedad_ledger = BandwidthLedger.load(run.ledger_path)
    _, fedavg_ledger, _ = fedavg_baseline(exp, rounds=args.rounds, local_epochs=1)

    rows = bandwidth_report(fedad_ledger, fedavg_ledger)
    print(f"{'method':<10}{'uplink':>14}{'downlink':>14}{'total':>14}{'transfers':>11}{'async':>8}")
    for row in rows:
        print(f"{row['method']:<10}{row['uplink_bytes']:>14,}{row['downlink_bytes']:>14,}"
              f"{row['total_bytes']:>14,}{row['transfers']:>11}{str(row['asynchronous']):>8}")
    ratio = rows[1]["total_bytes"] / max(rows[0]["total_bytes"], 1)
    print(f"\nfedavg/fedad byte ratio at {args.rounds} rounds: {ratio:.2f}x")

    out = Path(args.out) / "bandwidth.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
