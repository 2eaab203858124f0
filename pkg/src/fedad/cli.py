"""Command-line experiment runner.

Subcommands mirror the pipeline stages:

  partition | train-local | products | distill | evaluate | report
  | run-all | baseline-fedavg

Exit codes: 0 success, 2 config error, 3 missing dependency artifact,
4 runtime failure. Set FEDAD_OUTPUT_ROOT to relocate relative output dirs.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .ensemble import BundleSet
from .errors import ConfigError, MissingArtifactError, StageError
from .federation import FedADRun, LocalProduct, fedavg_baseline
from .utils import read_json


def _load_config(args) -> ExperimentConfig:
    exp = ExperimentConfig.from_file(args.config)
    if args.seed_override is not None:
        doc = dict(exp.raw)
        doc["seed"] = int(args.seed_override)
        exp = ExperimentConfig.from_dict(doc)
    if args.out:
        exp.out_dir = args.out
    return exp


def _require_artifact(path: Path, producer: str) -> None:
    if not path.exists():
        raise MissingArtifactError(f"{path} is missing; run `fedad {producer}` first")


def _node_arg(args, run: FedADRun) -> int:
    if args.node is None:
        raise ConfigError("--node is required for this command")
    k = int(args.node)
    if not 0 <= k < run.exp.num_nodes():
        raise ConfigError(f"--node {k} out of range for {run.exp.num_nodes()} nodes")
    return k


def cmd_partition(args) -> int:
    run = FedADRun(_load_config(args))
    spec = run.stage_partition()
    print(f"partition written: {run.partition_path} (nodes={spec.num_nodes}, alpha={spec.alpha})")
    return 0


def cmd_train_local(args) -> int:
    run = FedADRun(_load_config(args))
    k = _node_arg(args, run)
    _require_artifact(run.partition_path, "partition --config ...")
    path = run.stage_train_node(k)
    print(f"node {k} checkpoint: {path}")
    return 0


def cmd_products(args) -> int:
    run = FedADRun(_load_config(args))
    k = _node_arg(args, run)
    _require_artifact(run.node_ckpt(k), f"train-local --node {k}")
    path = run.stage_products(k)
    print(f"node {k} products: {path}")
    return 0


def cmd_distill(args) -> int:
    run = FedADRun(_load_config(args))
    for k in range(run.exp.num_nodes()):
        _require_artifact(run.product_path(k), f"products --node {k}")
    path = run.stage_distill()
    print(f"central checkpoint: {path}")
    return 0


def cmd_evaluate(args) -> int:
    run = FedADRun(_load_config(args))
    _require_artifact(run.student_path, "distill")
    report = run.stage_report()
    print(f"report: {run.report_path}")
    for key, value in report["metrics"].get("central", {}).items():
        if isinstance(value, float):
            print(f"  central {key}: {value:.4f}")
    return 0


def cmd_report(args) -> int:
    run = FedADRun(_load_config(args))
    _require_artifact(run.report_path, "evaluate")
    figures = render_figures(run)
    print("figures:")
    for f in figures:
        print(f"  {f}")
    return 0


def cmd_run_all(args) -> int:
    run = FedADRun(_load_config(args))
    report = run.run_all()
    render_figures(run)
    print(f"run complete: {run.out}")
    print(f"  stages run: {', '.join(report['stages_run']) or '(all reused)'}")
    for key, value in report["metrics"].get("central", {}).items():
        if isinstance(value, float):
            print(f"  central {key}: {value:.4f}")
    return 0


def cmd_baseline_fedavg(args) -> int:
    exp = _load_config(args)
    _, ledger, report = fedavg_baseline(exp)
    print(f"fedavg baseline over {report['rounds']} rounds")
    for key, value in report["metrics"].items():
        if isinstance(value, float):
            print(f"  {key}: {value:.4f}")
    print(f"  total bytes: {ledger.total_bytes()}")
    return 0


# ---------------------------------------------------------------------------
# figures


def render_figures(run: FedADRun) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = run.out / "report" / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    produced = []

    if run.history_path.exists():
        with open(run.history_path) as f:
            rows = list(csv.DictReader(f))
        steps = [int(r["step"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, label in (("total", "total"), ("L_w", "output"), ("L_low", "lower bound"),
                           ("L_up", "upper bound")):
            ax.plot(steps, [float(r[key]) for r in rows], label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        ax.set_title("distillation loss")
        fig.tight_layout()
        path = fig_dir / "loss_curves.png"
        fig.savefig(path)
        plt.close(fig)
        produced.append(path)

    if run.report_path.exists():
        report = read_json(run.report_path)
        central = report["metrics"].get("central", {})
        per_class = central.get("per_class_auc")
        fig, ax = plt.subplots(figsize=(6, 4))
        if per_class:
            keys = sorted(per_class, key=int)
            vals = [per_class[k] if per_class[k] is not None else 0.0 for k in keys]
            ax.bar(keys, vals)
            ax.set_xlabel("class")
            ax.set_ylabel("AUC")
            ax.set_title("central per-class AUC")
        else:
            scalars = {k: v for k, v in central.items() if isinstance(v, (int, float))}
            ax.bar(list(scalars), list(scalars.values()))
            ax.set_title("central metrics")
        fig.tight_layout()
        path = fig_dir / "metric_bars.png"
        fig.savefig(path)
        plt.close(fig)
        produced.append(path)

    overlay = _attention_overlay(run, fig_dir, plt)
    if overlay is not None:
        produced.append(overlay)
    return produced


def _attention_overlay(run: FedADRun, fig_dir: Path, plt) -> Path | None:
    """Teacher-attention regions (thresholded at 0.5) over a few public samples,
    with consensus/diversity contours."""
    if not run.bundles_path.exists():
        return None
    bundles = BundleSet.load(run.bundles_path)
    products = []
    for k in range(run.exp.num_nodes()):
        if not run.product_path(k).exists():
            return None
        products.append(LocalProduct.load(run.product_path(k)))
    images = run.public_ds.images
    n_show = min(4, len(images))
    colors = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    fig, axes = plt.subplots(1, n_show, figsize=(3 * n_show, 3.2), squeeze=False)
    for col in range(n_show):
        ax = axes[0][col]
        img = images[col, 0]
        ax.imshow(img, cmap="gray", interpolation="nearest")
        if bundles.task == "classification":
            cls = int(np.argmax(bundles.z_hat[col]))
            low, up = bundles.lower[col, cls], bundles.upper[col, cls]
            teacher_maps = [_product_map(p, col, cls) for p in products]
        elif bundles.task == "segmentation":
            cls = min(1, bundles.lower.shape[1] - 1)
            low, up = bundles.lower[col, cls], bundles.upper[col, cls]
            teacher_maps = [p.attention[col, cls] for p in products]
        else:
            # spatial saliency proxy: total incoming attention per position
            side = int(round(np.sqrt(bundles.lower.shape[-1])))
            low = bundles.lower[col].mean(axis=1).reshape(side, side)
            up = bundles.upper[col].mean(axis=1).reshape(side, side)
            low, up = low / max(low.max(), 1e-12), up / max(up.max(), 1e-12)
            teacher_maps = [
                p.attention[col].astype(np.float32).mean(axis=1).reshape(side, side) for p in products
            ]
            teacher_maps = [m / max(m.max(), 1e-12) for m in teacher_maps]
        overlay = np.zeros(img.shape + (4,), dtype=np.float32)
        for t, tmap in enumerate(teacher_maps[:3]):
            region = _upsample(np.asarray(tmap, dtype=np.float32), img.shape) >= 0.5
            color = colors[t % 3]
            for ch in range(3):
                overlay[..., ch][region] = np.clip(overlay[..., ch][region] + 0.7 * color[ch], 0, 1)
            overlay[..., 3][region] = 0.45
        ax.imshow(overlay, interpolation="nearest")
        ax.contour(_upsample(np.asarray(low, np.float32), img.shape), levels=[0.5],
                   colors="yellow", linewidths=1.5)
        ax.contour(_upsample(np.asarray(up, np.float32), img.shape), levels=[0.5],
                   colors="black", linewidths=1.5)
        ax.set_axis_off()
        ax.set_title(f"sample {col}")
    fig.suptitle("teacher attention >= 0.5 (colors), consensus (yellow) / diversity (black)")
    fig.tight_layout()
    path = fig_dir / "attention_overlays.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def _product_map(product: LocalProduct, sample: int, cls: int) -> np.ndarray:
    att = product.attention.astype(np.float32)
    if product.attention_classes == "top1":
        if product.top1_classes is not None and int(product.top1_classes[sample]) == cls:
            return att[sample, 0]
        return np.zeros(att.shape[-2:], dtype=np.float32)
    return att[sample, cls]


def _upsample(small: np.ndarray, shape) -> np.ndarray:
    reps = (int(np.ceil(shape[0] / small.shape[0])), int(np.ceil(shape[1] / small.shape[1])))
    big = np.kron(small, np.ones(reps, dtype=small.dtype))
    return big[: shape[0], : shape[1]]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedad", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "partition": cmd_partition,
        "train-local": cmd_train_local,
        "products": cmd_products,
        "distill": cmd_distill,
        "evaluate": cmd_evaluate,
        "report": cmd_report,
        "run-all": cmd_run_all,
        "baseline-fedavg": cmd_baseline_fedavg,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON or YAML)")
        p.add_argument("--node", type=int, default=None, help="node index for per-node stages")
        p.add_argument("--seed-override", type=int, default=None, help="replace the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # unexpected runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
