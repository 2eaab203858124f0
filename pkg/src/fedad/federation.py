"""End-to-end orchestration of the one-way offline federation.

Stages: partition -> independent local training -> public-data inference
products -> ensemble bundles -> central distillation -> evaluation. The only
thing that ever travels from a node to the server is a product file holding
predictions and attention maps on the shared public data, written through an
atomic file "wire"; the ledger accounts for every transferred byte. Stage
artifacts are content-addressed by their input hashes, so a rerun reuses
everything that is still valid, and nodes can be trained in separate
processes and merged by files.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as torchf

from .attention import GradCAM, segmentation_attention
from .config import ExperimentConfig
from .data import LabeledDataset, PublicDataset
from .distill import DistillConfig, StudentState, train_student
from .ensemble import (
    BundleSet,
    ImportanceWeights,
    class_importance_weights,
    size_weights,
    uniform_weights,
    weighted_ensemble,
)
from .errors import MissingArtifactError, StageError
from .evaluate import accuracy, auc, dice, mean_psnr, mean_ssim
from .models import build_student, parameter_bytes
from .partition import PartitionSpec, dirichlet_partition, fraction_partition, holdout_validation
from .utils import (
    array_checksum,
    config_hash,
    file_checksum,
    read_json,
    seed_everything,
    write_json_atomic,
)

# instrumentation: product-generation forward passes per node, used to assert
# that one-shot distillation never invokes a teacher again
TEACHER_FORWARDS: dict[int, int] = defaultdict(int)


def teacher_forward_total() -> int:
    return sum(TEACHER_FORWARDS.values())


# ---------------------------------------------------------------------------
# privacy instrumentation


class AccessLog:
    """Counts every private-sample read, tagged by pipeline phase and node."""

    def __init__(self):
        self.phase = "init"
        self._reads: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))

    def set_phase(self, phase: str) -> None:
        self.phase = phase

    def register(self, node_id: int, global_ids) -> None:
        self._reads[self.phase][node_id].extend(int(i) for i in np.atleast_1d(global_ids))

    def summary(self, assignments=None) -> dict:
        out = {}
        for phase, per_node in self._reads.items():
            out[phase] = {}
            for node, ids in per_node.items():
                entry = {"reads": len(ids), "unique": len(set(ids))}
                if assignments is not None:
                    allowed = set(map(int, assignments[node]))
                    entry["foreign"] = sum(1 for i in set(ids) if i not in allowed)
                out[phase][str(node)] = entry
        return out

    def reads_outside(self, allowed_phase: str) -> int:
        return sum(
            len(ids)
            for phase, per_node in self._reads.items()
            if phase != allowed_phase
            for ids in per_node.values()
        )


class PrivateSlice:
    """A node's view of its private slice; every read is access-logged."""

    def __init__(self, dataset: LabeledDataset, indices, node_id: int, log: AccessLog):
        self.images = dataset.images
        self.targets = dataset.targets
        self.indices = np.asarray(indices, dtype=np.int64)
        self.node_id = node_id
        self.log = log

    def __len__(self):
        return len(self.indices)

    def batch(self, local_ids):
        global_ids = self.indices[np.asarray(local_ids, dtype=np.int64)]
        self.log.register(self.node_id, global_ids)
        x = torch.as_tensor(self.images[global_ids])
        y = torch.as_tensor(self.targets[global_ids])
        return x, y


# ---------------------------------------------------------------------------
# bandwidth accounting


@dataclass
class TransferRecord:
    sender: str
    receiver: str
    kind: str  # "products" | "parameters"
    bytes: int
    round: int = 0


@dataclass
class BandwidthLedger:
    """Byte-exact record of everything transmitted between nodes and server."""

    method: str = "fedad"
    records: list[TransferRecord] = field(default_factory=list)

    def add(self, sender: str, receiver: str, kind: str, nbytes: int, round: int = 0) -> None:
        self.records.append(TransferRecord(sender, receiver, kind, int(nbytes), round))

    def uplink_bytes(self) -> int:
        return sum(r.bytes for r in self.records if r.receiver == "central")

    def downlink_bytes(self) -> int:
        return sum(r.bytes for r in self.records if r.sender == "central")

    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.records)

    def transfer_count(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "records": [asdict(r) for r in self.records],
            "totals": {
                "local_to_central": self.uplink_bytes(),
                "central_to_local": self.downlink_bytes(),
                "total": self.total_bytes(),
            },
        }

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BandwidthLedger":
        ledger = cls(method=d.get("method", "fedad"))
        for r in d.get("records", []):
            ledger.add(r["sender"], r["receiver"], r["kind"], r["bytes"], r.get("round", 0))
        return ledger

    @classmethod
    def load(cls, path) -> "BandwidthLedger":
        return cls.from_dict(read_json(path))


def bandwidth_report(*ledgers: BandwidthLedger) -> list[dict]:
    """Per-method totals with direction split and an asynchrony flag.

    A method is asynchronous when nothing ever flows central -> local, i.e.
    nodes never have to wait for aggregated state.
    """
    rows = []
    for ledger in ledgers:
        down = ledger.downlink_bytes()
        rows.append(
            {
                "method": ledger.method,
                "uplink_bytes": ledger.uplink_bytes(),
                "downlink_bytes": down,
                "total_bytes": ledger.total_bytes(),
                "transfers": ledger.transfer_count(),
                "asynchronous": down == 0,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# node configuration and manifest


@dataclass
class NodeConfig:
    node_id: int
    architecture: str = "cnn-small"
    epochs: int = 4
    batch_size: int = 64
    optimizer: str = "sgd-cosine"
    lr: float = 2e-2
    lr_end: float = 1e-4
    momentum: float = 0.9
    seed: int = 0

    @classmethod
    def from_dict(cls, node_id: int, d: dict, seed: int) -> "NodeConfig":
        known = {f for f in cls.__dataclass_fields__ if f not in ("node_id", "seed")}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown node config keys {sorted(extra)}")
        return cls(node_id=node_id, seed=seed, **{k: d[k] for k in d})


@dataclass
class FederationManifest:
    """Everything the pipeline needs to reproduce a federation end to end."""

    name: str
    task: str
    seed: int
    num_classes: int
    image_size: int
    dataset_id: str
    public_id: str
    test_id: str
    nodes: list[NodeConfig]
    student_architecture: str
    distill: dict
    partition_hash: str = ""
    products_options: dict = field(default_factory=dict)
    weights: dict | None = None

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ValueError("node ids must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nodes"] = [asdict(n) for n in self.nodes]
        return d

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FederationManifest":
        d = dict(d)
        d["nodes"] = [NodeConfig(**n) for n in d["nodes"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# local training


def _task_loss(task: str):
    if task == "reconstruction":
        return lambda out, target: torchf.mse_loss(out, target)
    return lambda out, target: torchf.cross_entropy(out, target)


def train_local_model(node_cfg: NodeConfig, task: str, slice_view: PrivateSlice,
                      num_classes: int, image_size: int):
    """Train one node to completion on its own slice only.

    Returns (model, log). Deterministic for a fixed node seed; the model is
    left in eval mode with gradients still enabled so attention extraction
    keeps working on the frozen teacher.
    """
    rng = seed_everything(node_cfg.seed)
    model = build_student(node_cfg.architecture, num_classes=max(num_classes, 1), image_size=image_size)
    steps_per_epoch = max(1, int(np.ceil(len(slice_view) / node_cfg.batch_size)))
    if node_cfg.optimizer == "sgd-cosine":
        opt = torch.optim.SGD(model.parameters(), lr=node_cfg.lr, momentum=node_cfg.momentum)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(steps_per_epoch * node_cfg.epochs, 1), eta_min=node_cfg.lr_end
        )
    elif node_cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=node_cfg.lr)
        sched = None
    elif node_cfg.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=node_cfg.lr, momentum=node_cfg.momentum)
        sched = None
    else:
        raise ValueError(f"unknown local optimizer {node_cfg.optimizer!r}")
    loss_fn = _task_loss(task)
    log = []
    model.train()
    for epoch in range(node_cfg.epochs):
        order = rng.permutation(len(slice_view))
        epoch_loss = 0.0
        for start in range(0, len(order), node_cfg.batch_size):
            x, y = slice_view.batch(order[start : start + node_cfg.batch_size])
            out = model(x)
            loss = loss_fn(out, y)
            if not torch.isfinite(loss):
                raise StageError("train-local", f"node {node_cfg.node_id}: non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            epoch_loss += float(loss.detach()) * len(x)
        log.append({"epoch": epoch, "loss": epoch_loss / len(slice_view)})
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# public-data inference products


@dataclass
class LocalProduct:
    """One node's serialized inference output on the public data."""

    node_id: int
    public_id: str
    task: str
    predictions: np.ndarray
    attention: np.ndarray
    dataset_size: int
    class_counts: list[int] | None = None
    attention_kind: str = "gradcam"
    attention_classes: str = "all"  # "all" | "top1"
    top1_classes: np.ndarray | None = None
    zero_map_fraction: float = 0.0
    payload_bytes: int = 0

    def __post_init__(self):
        if self.payload_bytes == 0:
            self.payload_bytes = int(self.predictions.nbytes + self.attention.nbytes)
            if self.top1_classes is not None:
                self.payload_bytes += int(self.top1_classes.nbytes)

    def checksum(self) -> str:
        return array_checksum(self.predictions, self.attention)

    def sidecar(self) -> dict:
        return {
            "node_id": self.node_id,
            "public_id": self.public_id,
            "task": self.task,
            "dataset_size": self.dataset_size,
            "class_counts": self.class_counts,
            "attention_kind": self.attention_kind,
            "attention_classes": self.attention_classes,
            "attention_dtype": str(self.attention.dtype),
            "normalized": True,
            "zero_map_fraction": self.zero_map_fraction,
            "payload_bytes": self.payload_bytes,
            "shapes": {
                "predictions": list(self.predictions.shape),
                "attention": list(self.attention.shape),
            },
        }

    def save(self, path) -> int:
        """Atomically write archive + sidecar; returns the archive's file size."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        arrays = {"predictions": self.predictions, "attention": self.attention}
        if self.top1_classes is not None:
            arrays["top1_classes"] = self.top1_classes
        np.savez(tmp, **arrays)
        tmp.replace(path)
        write_json_atomic(path.with_suffix(".json"), self.sidecar())
        return path.stat().st_size

    @classmethod
    def load(cls, path) -> "LocalProduct":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"product file not found: {path}")
        meta = read_json(path.with_suffix(".json"))
        arrays = np.load(path)
        return cls(
            node_id=int(meta["node_id"]),
            public_id=meta["public_id"],
            task=meta["task"],
            predictions=arrays["predictions"],
            attention=arrays["attention"],
            dataset_size=int(meta["dataset_size"]),
            class_counts=meta.get("class_counts"),
            attention_kind=meta.get("attention_kind", "gradcam"),
            attention_classes=meta.get("attention_classes", "all"),
            top1_classes=arrays["top1_classes"] if "top1_classes" in arrays else None,
            zero_map_fraction=float(meta.get("zero_map_fraction", 0.0)),
            payload_bytes=int(meta.get("payload_bytes", 0)),
        )


def product_payload_bytes(n_samples: int, num_classes: int, map_height: int, map_width: int,
                          attention_dtype_bytes: int = 4, attention_classes: str = "all") -> int:
    """Closed-form payload size for classification products.

    float32 logits for every class plus one attention map per class (or per
    top-1 class), excluding container metadata.
    """
    maps = num_classes if attention_classes == "all" else 1
    per_sample = num_classes * 4 + maps * map_height * map_width * attention_dtype_bytes
    extra = n_samples * 8 if attention_classes == "top1" else 0  # int64 class ids
    return n_samples * per_sample + extra


def infer_public_products(model, public: PublicDataset, task: str, node_id: int,
                          dataset_size: int, class_counts=None, tau: float = 3.0,
                          attention_classes: str = "all", quantize_float16: bool = False,
                          batch_size: int = 64) -> LocalProduct:
    """Run a frozen teacher over the whole public set; deterministic.

    Produces per-sample predictions plus normalized attention, ready to be
    shipped. Classification attention is per class unless the top-1-only
    bandwidth mode is requested.
    """
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    model.eval()
    images = torch.as_tensor(public.images)
    preds, atts, top1 = [], [], []
    zero_maps = 0
    total_maps = 0
    cam = GradCAM(model) if task == "classification" else None
    try:
        for start in range(0, len(public), batch_size):
            x = images[start : start + batch_size]
            TEACHER_FORWARDS[node_id] += 1
            if task == "classification":
                logits, maps = cam.all_class_maps(x)  # (B, C), (B, C, h, w)
                if attention_classes == "top1":
                    best = logits.argmax(dim=1)
                    maps = maps[torch.arange(len(x)), best].unsqueeze(1)
                    top1.append(best.numpy().astype(np.int64))
                zero_maps += int((maps.amax(dim=(-2, -1)) == 0).sum())
                total_maps += maps.shape[0] * maps.shape[1]
                preds.append(logits.detach().numpy())
                atts.append(maps.detach().numpy())
            elif task == "segmentation":
                with torch.no_grad():
                    logits = model(x)
                    maps = segmentation_attention(logits, tau)
                total_maps += maps.shape[0] * maps.shape[1]
                preds.append(logits.numpy())
                atts.append(maps.numpy())
            elif task == "reconstruction":
                with torch.no_grad():
                    out = model(x)
                    att = model.spatial_attention()
                total_maps += att.shape[0]
                preds.append(out.numpy())
                atts.append(att.numpy())
            else:
                raise ValueError(f"unknown task {task!r}")
    finally:
        if cam is not None:
            cam.close()
    attention = np.concatenate(atts).astype(np.float16 if quantize_float16 else np.float32)
    kind = {"classification": "gradcam", "segmentation": "segmentation-prob",
            "reconstruction": "nonlocal"}[task]
    return LocalProduct(
        node_id=node_id,
        public_id=public.id,
        task=task,
        predictions=np.concatenate(preds).astype(np.float32),
        attention=attention,
        dataset_size=int(dataset_size),
        class_counts=list(map(int, class_counts)) if class_counts is not None else None,
        attention_kind=kind,
        attention_classes=attention_classes if task == "classification" else "all",
        top1_classes=np.concatenate(top1) if top1 else None,
        zero_map_fraction=zero_maps / max(total_maps, 1),
    )


# ---------------------------------------------------------------------------
# bundles


def ensemble_weights(products: list[LocalProduct], scheme: str = "importance") -> ImportanceWeights:
    task = products[0].task
    if scheme == "uniform":
        if task == "classification" and products[0].class_counts is not None:
            return uniform_weights(len(products), len(products[0].class_counts))
        return uniform_weights(len(products))
    if task == "classification":
        counts = [p.class_counts for p in products]
        if any(c is None for c in counts):
            raise ValueError("classification products must carry class_counts")
        return class_importance_weights(np.asarray(counts))
    return size_weights([p.dataset_size for p in products])


def _dense_attention(product: LocalProduct, num_classes: int):
    """Per-class attention stack plus a contribution mask (top-1 mode is sparse)."""
    att = product.attention.astype(np.float32)
    n = att.shape[0]
    if product.attention_classes == "all":
        return att, np.ones((n, att.shape[1]), dtype=bool)
    dense = np.zeros((n, num_classes) + att.shape[2:], dtype=np.float32)
    mask = np.zeros((n, num_classes), dtype=bool)
    rows = np.arange(n)
    dense[rows, product.top1_classes] = att[:, 0]
    mask[rows, product.top1_classes] = True
    return dense, mask


def build_bundles(products: list[LocalProduct], weights: ImportanceWeights | None = None,
                  scheme: str = "importance") -> BundleSet:
    """Combine per-node products into per-sample ensemble targets and bounds.

    Pure function of its inputs: rerunning on the same products yields
    bitwise-identical bundles. All products must cover the same public
    dataset (hash-checked) and agree in shape.
    """
    if not products:
        raise ValueError("no products to bundle")
    first = products[0]
    for p in products[1:]:
        if p.public_id != first.public_id:
            raise ValueError(
                f"product public-id mismatch: node {p.node_id} has {p.public_id}, "
                f"expected {first.public_id}"
            )
        if p.task != first.task:
            raise ValueError("products disagree on task")
        if p.predictions.shape != first.predictions.shape:
            raise ValueError("products disagree on prediction shape")
    weights = weights or ensemble_weights(products, scheme)
    z_hat = weighted_ensemble([p.predictions for p in products], weights).astype(np.float32)

    if first.task == "classification":
        num_classes = first.predictions.shape[1]
        dense = [_dense_attention(p, num_classes) for p in products]
        stacks = np.stack([d[0] for d in dense])  # (K, N, C, h, w)
        masks = np.stack([d[1] for d in dense])  # (K, N, C)
        m = masks[:, :, :, None, None]
        lower = np.where(m, stacks, np.inf).min(axis=0)
        upper = np.where(m, stacks, -np.inf).max(axis=0)
        nothing = ~masks.any(axis=0)  # classes no node contributed
        lower[nothing] = 0.0
        upper[nothing] = 0.0
    else:
        stacks = np.stack([p.attention.astype(np.float32) for p in products])
        lower = stacks.min(axis=0)
        upper = stacks.max(axis=0)

    return BundleSet(
        public_id=first.public_id,
        task=first.task,
        z_hat=z_hat,
        lower=lower.astype(np.float32),
        upper=upper.astype(np.float32),
        weights=weights,
        source_products=[p.checksum() for p in products],
    )


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(images)
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(model(x[start : start + batch_size]).numpy())
    return np.concatenate(outs)


def evaluate_model(model, test: LabeledDataset, per_class: bool = False) -> dict:
    """Task metrics of a model on a labeled test set."""
    out = predict(model, test.images)
    if test.task == "classification":
        by_class, mean_auc = auc(out, test.targets)
        metrics = {"accuracy": accuracy(out, test.targets), "mean_auc": mean_auc}
        if per_class:
            metrics["per_class_auc"] = {str(c): v for c, v in by_class.items()}
        return metrics
    if test.task == "segmentation":
        pred = out.argmax(axis=1)
        scores = [dice(p == 1, t == 1) for p, t in zip(pred, test.targets)]
        return {"mean_dice": float(np.mean(scores))}
    return {
        "ssim": mean_ssim(out[:, 0], test.targets[:, 0]),
        "psnr": mean_psnr(out[:, 0], test.targets[:, 0]),
    }


# ---------------------------------------------------------------------------
# the staged pipeline


class FedADRun:
    """Materializes an experiment and drives the staged pipeline.

    Every stage writes its artifact atomically together with a meta file
    recording the hash of its inputs; a stage whose artifact and input hash
    both match is reused instead of recomputed.
    """

    def __init__(self, exp: ExperimentConfig, out_dir=None, force: bool = False):
        self.exp = exp
        self.out = Path(out_dir) if out_dir else exp.resolved_out_dir()
        self.force = force
        self.access_log = AccessLog()
        self.stages_run: list[str] = []
        self.stages_reused: list[str] = []
        try:
            self.train_ds, self.public_ds, self.test_ds = exp.materialize()
        except Exception as exc:
            raise StageError("materialize", str(exc)) from exc
        self.out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(self.out / "config.lock.json",
                          {"config": exp.raw, "hash": exp.hash(),
                           "dataset_id": self.train_ds.id, "public_id": self.public_ds.id})

    # -- paths ---------------------------------------------------------------

    @property
    def partition_path(self) -> Path:
        return self.out / "partition.json"

    @property
    def holdout_path(self) -> Path:
        return self.out / "holdout.json"

    def node_ckpt(self, k: int) -> Path:
        return self.out / "nodes" / f"node{k}.pt"

    def node_access(self, k: int) -> Path:
        return self.out / "nodes" / f"node{k}.access.json"

    def product_path(self, k: int) -> Path:
        return self.out / "products" / f"node{k}.npz"

    @property
    def bundles_path(self) -> Path:
        return self.out / "bundles" / "bundles.npz"

    @property
    def student_path(self) -> Path:
        return self.out / "student" / "student.pt"

    @property
    def history_path(self) -> Path:
        return self.out / "student" / "history.csv"

    @property
    def ledger_path(self) -> Path:
        return self.out / "ledger.json"

    @property
    def report_path(self) -> Path:
        return self.out / "report" / "report.json"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    # -- helpers --------------------------------------------------------------

    def _meta_path(self, artifact: Path) -> Path:
        return artifact.with_name(artifact.name + ".meta.json")

    def _reusable(self, artifact: Path, input_hash: str) -> bool:
        if self.force or not artifact.exists():
            return False
        meta = self._meta_path(artifact)
        if not meta.exists():
            return False
        return read_json(meta).get("input_hash") == input_hash

    def _mark(self, artifact: Path, input_hash: str, stage: str) -> None:
        write_json_atomic(self._meta_path(artifact), {"stage": stage, "input_hash": input_hash})

    def node_configs(self) -> list[NodeConfig]:
        defaults = {"architecture": "unet-tiny" if self.exp.task == "reconstruction" else "cnn-small"}
        if self.exp.task == "reconstruction":
            defaults.update({"optimizer": "adam", "lr": 1e-3, "epochs": 6, "batch_size": 16})
        cfgs = []
        for k in range(self.exp.num_nodes()):
            d = {**defaults, **self.exp.node_dict(k)}
            cfgs.append(NodeConfig.from_dict(k, d, seed=self.exp.seed * 1009 + 11 * k + 1))
        return cfgs

    def manifest(self) -> FederationManifest:
        train = self.train_ds
        num_classes = train.num_classes if train.task != "reconstruction" else 0
        return FederationManifest(
            name=self.exp.name,
            task=self.exp.task,
            seed=self.exp.seed,
            num_classes=num_classes,
            image_size=train.images.shape[-1],
            dataset_id=train.id,
            public_id=self.public_ds.id,
            test_id=self.test_ds.id if self.test_ds else "",
            nodes=self.node_configs(),
            student_architecture=self.exp.student_architecture(),
            distill=asdict(self.exp.distill_config()),
            products_options=dict(self.exp.products),
        )

    # -- stages ----------------------------------------------------------------

    def stage_partition(self) -> PartitionSpec:
        p = self.exp.partition
        input_hash = config_hash({"dataset": self.train_ds.id, "partition": p})
        if self._reusable(self.partition_path, input_hash):
            self.stages_reused.append("partition")
            return PartitionSpec.load(self.partition_path)
        self.stages_run.append("partition")
        try:
            seed = int(p.get("seed", self.exp.seed + 4))
            holdout = float(p.get("holdout_fraction", 0.0))
            n = len(self.train_ds)
            if holdout > 0:
                train_idx, val_idx = holdout_validation(np.arange(n), holdout, seed)
            else:
                train_idx, val_idx = np.arange(n), np.asarray([], dtype=np.int64)
            if "fractions" in p:
                local = fraction_partition(len(train_idx), p["fractions"], seed)
            else:
                local = dirichlet_partition(
                    self.train_ds.targets[train_idx]
                    if self.exp.task == "classification"
                    else np.zeros(len(train_idx), dtype=np.int64),
                    int(p["num_nodes"]),
                    float(p["alpha"]),
                    seed,
                )
            spec = PartitionSpec(
                num_nodes=local.num_nodes,
                alpha=local.alpha,
                seed=local.seed,
                assignments=[sorted(train_idx[np.asarray(a)].tolist()) for a in local.assignments],
                class_counts=local.class_counts,
                backfilled_nodes=local.backfilled_nodes,
            )
            spec.save(self.partition_path)
            write_json_atomic(self.holdout_path,
                              {"fraction": holdout, "validation_indices": val_idx.tolist()})
            self._mark(self.partition_path, input_hash, "partition")
            return spec
        except StageError:
            raise
        except Exception as exc:
            raise StageError("partition", str(exc)) from exc

    def _node_hash(self, k: int, node_cfg: NodeConfig) -> str:
        return config_hash({
            "partition": file_checksum(self.partition_path),
            "node": asdict(node_cfg),
            "dataset": self.train_ds.id,
            "task": self.exp.task,
        })

    def stage_train_node(self, k: int) -> Path:
        spec = self.stage_partition()
        node_cfg = self.node_configs()[k]
        input_hash = self._node_hash(k, node_cfg)
        if self._reusable(self.node_ckpt(k), input_hash):
            self.stages_reused.append(f"train-node{k}")
            return self.node_ckpt(k)
        self.stages_run.append(f"train-node{k}")
        try:
            self.access_log.set_phase("local-training")
            slice_view = PrivateSlice(self.train_ds, spec.assignments[k], k, self.access_log)
            model, log = train_local_model(
                node_cfg, self.exp.task, slice_view,
                self.train_ds.num_classes if self.exp.task != "reconstruction" else 1,
                self.train_ds.images.shape[-1],
            )
            self.node_ckpt(k).parent.mkdir(parents=True, exist_ok=True)
            torch.save(model.state_dict(), self.node_ckpt(k))
            write_json_atomic(
                self.node_access(k),
                {"node": k, "summary": self.access_log.summary(spec.assignments)},
            )
            write_json_atomic(self.out / "nodes" / f"node{k}.train.json",
                              {"node": k, "log": log, "slice_size": len(slice_view)})
            self._mark(self.node_ckpt(k), input_hash, f"train-node{k}")
            return self.node_ckpt(k)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("train-local", f"node {k}: {exc}") from exc

    def _load_node_model(self, k: int):
        spec = PartitionSpec.load(self.partition_path)
        node_cfg = self.node_configs()[k]
        num_classes = self.train_ds.num_classes if self.exp.task != "reconstruction" else 1
        torch.manual_seed(0)
        model = build_student(node_cfg.architecture, num_classes=max(num_classes, 1),
                              image_size=self.train_ds.images.shape[-1])
        if not self.node_ckpt(k).exists():
            raise MissingArtifactError(f"node checkpoint missing: {self.node_ckpt(k)}")
        model.load_state_dict(torch.load(self.node_ckpt(k), weights_only=True))
        model.eval()
        return model, spec

    def stage_products(self, k: int) -> Path:
        self.stage_train_node(k)
        opts = self.exp.products
        input_hash = config_hash({
            "ckpt": file_checksum(self.node_ckpt(k)),
            "public": self.public_ds.id,
            "options": opts,
            "tau": self.exp.distill_config().tau,
        })
        if self._reusable(self.product_path(k), input_hash):
            self.stages_reused.append(f"products-node{k}")
            return self.product_path(k)
        self.stages_run.append(f"products-node{k}")
        try:
            self.access_log.set_phase("products")
            model, spec = self._load_node_model(k)
            product = infer_public_products(
                model,
                self.public_ds,
                self.exp.task,
                node_id=k,
                dataset_size=len(spec.assignments[k]),
                class_counts=spec.class_counts[k] if self.exp.task == "classification" else None,
                tau=self.exp.distill_config().tau,
                attention_classes=opts.get("attention_classes", "all"),
                quantize_float16=bool(opts.get("quantize_float16", False)),
            )
            product.save(self.product_path(k))
            self._mark(self.product_path(k), input_hash, f"products-node{k}")
            return self.product_path(k)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("products", f"node {k}: {exc}") from exc

    def _build_ledger(self) -> BandwidthLedger:
        """One product upload per node; one-shot means exactly one round.

        With one_shot disabled the (identical, teachers are frozen) products
        are re-fetched every distillation epoch, which only multiplies the
        ledger — the online mode exists for bandwidth comparisons.
        """
        cfg = self.exp.distill_config()
        rounds = 1 if cfg.one_shot else cfg.epochs
        ledger = BandwidthLedger(method="fedad")
        for rnd in range(rounds):
            for k in range(self.exp.num_nodes()):
                path = self.product_path(k)
                if not path.exists():
                    raise MissingArtifactError(f"product file missing: {path}")
                nbytes = path.stat().st_size + path.with_suffix(".json").stat().st_size
                ledger.add(f"node{k}", "central", "products", nbytes, round=rnd)
        return ledger

    def stage_bundles(self) -> BundleSet:
        for k in range(self.exp.num_nodes()):
            self.stage_products(k)
        scheme = "uniform" if self.exp.distill.get("uniform_ensemble") else "importance"
        input_hash = config_hash({
            "products": [file_checksum(self.product_path(k)) for k in range(self.exp.num_nodes())],
            "scheme": scheme,
        })
        if self._reusable(self.bundles_path, input_hash):
            self.stages_reused.append("bundles")
            return BundleSet.load(self.bundles_path)
        self.stages_run.append("bundles")
        try:
            products = [LocalProduct.load(self.product_path(k)) for k in range(self.exp.num_nodes())]
            bundles = build_bundles(products, scheme=scheme)
            bundles.save(self.bundles_path)
            self._mark(self.bundles_path, input_hash, "bundles")
            ledger = self._build_ledger()
            ledger.save(self.ledger_path)
            manifest = self.manifest()
            manifest.partition_hash = file_checksum(self.partition_path)
            manifest.weights = bundles.weights.to_dict()
            manifest.save(self.manifest_path)
            return bundles
        except StageError:
            raise
        except Exception as exc:
            raise StageError("bundles", str(exc)) from exc

    def _distill_inputs(self, bundles: BundleSet):
        """Apply the optional public-data subsample used for ablations."""
        sub = self.exp.distill.get("public_subset")
        if not sub:
            return self.public_ds, bundles
        n = max(1, int(round(float(sub) * len(self.public_ds))))
        public = PublicDataset(self.public_ds.images[:n], modality=self.public_ds.modality)
        subset = bundles.subset(np.arange(n))
        subset.public_id = public.id
        return public, subset

    def stage_distill(self) -> Path:
        bundles = self.stage_bundles()
        cfg = self.exp.distill_config()
        input_hash = config_hash({
            "bundles": file_checksum(self.bundles_path),
            "distill": asdict(cfg),
            "architecture": self.exp.student_architecture(),
            "public_subset": self.exp.distill.get("public_subset"),
        })
        if self._reusable(self.student_path, input_hash):
            self.stages_reused.append("distill")
            return self.student_path
        self.stages_run.append("distill")
        try:
            self.access_log.set_phase("distill")
            forwards_before = teacher_forward_total()
            public, bundles = self._distill_inputs(bundles)
            torch.manual_seed(cfg.seed)
            num_classes = self.train_ds.num_classes if self.exp.task != "reconstruction" else 1
            student = build_student(
                self.exp.student_architecture(),
                num_classes=max(num_classes, 1),
                image_size=self.train_ds.images.shape[-1],
            )
            state = train_student(student, public, bundles, cfg)
            self.student_path.parent.mkdir(parents=True, exist_ok=True)
            state.save_checkpoint(self.student_path, cfg)
            state.save_history(self.history_path)
            write_json_atomic(
                self.out / "student" / "instrumentation.json",
                {
                    "teacher_forwards_during_distill": teacher_forward_total() - forwards_before,
                    "private_reads_during_distill": self.access_log.reads_outside("local-training"),
                },
            )
            self._mark(self.student_path, input_hash, "distill")
            return self.student_path
        except StageError:
            raise
        except Exception as exc:
            raise StageError("distill", str(exc)) from exc

    def stage_report(self) -> dict:
        self.stage_distill()
        try:
            self.access_log.set_phase("evaluate")
            spec = PartitionSpec.load(self.partition_path)
            cfg = self.exp.distill_config()
            num_classes = self.train_ds.num_classes if self.exp.task != "reconstruction" else 1
            torch.manual_seed(cfg.seed)
            student = build_student(self.exp.student_architecture(),
                                    num_classes=max(num_classes, 1),
                                    image_size=self.train_ds.images.shape[-1])
            student.load_state_dict(torch.load(self.student_path, weights_only=True))
            student.eval()

            metrics: dict = {"central": {}, "standalone": {}}
            if self.test_ds is not None:
                metrics["central"] = evaluate_model(student, self.test_ds, per_class=True)
                for k in range(self.exp.num_nodes()):
                    model, _ = self._load_node_model(k)
                    metrics["standalone"][str(k)] = evaluate_model(model, self.test_ds)
                per_node = list(metrics["standalone"].values())
                scalar_keys = [k for k, v in per_node[0].items() if isinstance(v, (int, float))]
                sizes = np.asarray([len(a) for a in spec.assignments], dtype=np.float64)
                sizes /= sizes.sum()
                metrics["standalone_mean"] = {
                    key: float(np.mean([m[key] for m in per_node])) for key in scalar_keys
                }
                metrics["standalone_size_weighted_mean"] = {
                    key: float(sizes @ np.asarray([m[key] for m in per_node])) for key in scalar_keys
                }

            ledger = BandwidthLedger.load(self.ledger_path)
            instrumentation = read_json(self.out / "student" / "instrumentation.json")
            access = self.access_log.summary(spec.assignments)
            foreign = sum(entry.get("foreign", 0)
                          for per_node in access.values() for entry in per_node.values())
            report = {
                "name": self.exp.name,
                "task": self.exp.task,
                "config_hash": self.exp.hash(),
                "seed": self.exp.seed,
                "metrics": metrics,
                "bandwidth": bandwidth_report(ledger)[0],
                "privacy": {
                    "foreign_slice_reads": foreign,
                    "private_reads_outside_local_training": self.access_log.reads_outside("local-training"),
                    **instrumentation,
                    "access_by_phase": access,
                },
                "weights": read_json(self.manifest_path).get("weights"),
                "stages_run": self.stages_run,
                "stages_reused": self.stages_reused,
                "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            }
            self.report_path.parent.mkdir(parents=True, exist_ok=True)
            write_json_atomic(self.report_path, report)
            self._write_metrics_csv(report)
            return report
        except StageError:
            raise
        except Exception as exc:
            raise StageError("report", str(exc)) from exc

    def _write_metrics_csv(self, report: dict) -> None:
        import csv

        rows = []
        test_domain = self.test_ds.modality if self.test_ds else ""
        central = report["metrics"].get("central", {})
        for metric, value in central.items():
            if isinstance(value, (int, float)):
                rows.append(("fedad", "all-nodes", test_domain, metric, value))
        for node, mdict in report["metrics"].get("standalone", {}).items():
            for metric, value in mdict.items():
                if isinstance(value, (int, float)):
                    rows.append((f"standalone-node{node}", f"node{node}", test_domain, metric, value))
        with open(self.out / "report" / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["method", "train_domains", "test_domain", "metric", "value"])
            writer.writerows(rows)

    def run_all(self) -> dict:
        return self.stage_report()


def run_fedad(exp: ExperimentConfig, out_dir=None, force: bool = False) -> dict:
    """Execute the whole pipeline (partition through report) for one config."""
    return FedADRun(exp, out_dir=out_dir, force=force).run_all()


# ---------------------------------------------------------------------------
# FedAvg reference baseline


def _average_states(states: list[dict], weights: np.ndarray) -> dict:
    avg = {}
    for key in states[0]:
        stacked = torch.stack([s[key].to(torch.float64) * w for s, w in zip(states, weights)])
        avg[key] = stacked.sum(dim=0).to(states[0][key].dtype)
    return avg


def fedavg_baseline(exp: ExperimentConfig, rounds: int | None = None,
                    local_epochs: int | None = None, out_dir=None) -> tuple:
    """Synchronized parameter-averaging baseline over the same partition.

    All nodes must share one architecture. Every round ships the central
    parameters to each node and each node's parameters back, so the ledger
    holds 2 * K * rounds parameter transfers.

    Returns (central_model, ledger, report_dict).
    """
    fa = exp.fedavg
    rounds = int(rounds if rounds is not None else fa.get("rounds", 5))
    local_epochs = int(local_epochs if local_epochs is not None else fa.get("local_epochs", 1))
    run = FedADRun(exp, out_dir=out_dir) if out_dir else FedADRun(exp)
    spec = run.stage_partition()
    node_cfgs = run.node_configs()
    archs = {c.architecture for c in node_cfgs}
    if len(archs) > 1:
        raise ValueError(
            f"parameter averaging requires homogeneous architectures, got {sorted(archs)}; "
            "use the distillation pipeline for heterogeneous federations"
        )
    task = exp.task
    num_classes = run.train_ds.num_classes if task != "reconstruction" else 1
    seed_everything(exp.seed + 17)
    central = build_student(archs.pop(), num_classes=max(num_classes, 1),
                            image_size=run.train_ds.images.shape[-1])
    param_size = parameter_bytes(central)
    ledger = BandwidthLedger(method="fedavg")
    log = AccessLog()
    sizes = np.asarray([len(a) for a in spec.assignments], dtype=np.float64)
    sizes /= sizes.sum()
    loss_fn = _task_loss(task)

    for rnd in range(1, rounds + 1):
        log.set_phase(f"round-{rnd}")
        states = []
        for k, cfg in enumerate(node_cfgs):
            ledger.add("central", f"node{k}", "parameters", param_size, round=rnd)
            rng = seed_everything(exp.seed * 7919 + rnd * 131 + k)
            local = build_student(cfg.architecture, num_classes=max(num_classes, 1),
                                  image_size=run.train_ds.images.shape[-1])
            local.load_state_dict(central.state_dict())
            slice_view = PrivateSlice(run.train_ds, spec.assignments[k], k, log)
            opt = torch.optim.SGD(local.parameters(), lr=cfg.lr, momentum=cfg.momentum) \
                if cfg.optimizer.startswith("sgd") else torch.optim.Adam(local.parameters(), lr=cfg.lr)
            local.train()
            for _ in range(local_epochs):
                order = rng.permutation(len(slice_view))
                for start in range(0, len(order), cfg.batch_size):
                    x, y = slice_view.batch(order[start : start + cfg.batch_size])
                    loss = loss_fn(local(x), y)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
            states.append(local.state_dict())
            ledger.add(f"node{k}", "central", "parameters", param_size, round=rnd)
        central.load_state_dict(_average_states(states, sizes))

    central.eval()
    report = {
        "method": "fedavg",
        "rounds": rounds,
        "local_epochs": local_epochs,
        "parameter_bytes": param_size,
        "bandwidth": bandwidth_report(ledger)[0],
        "metrics": evaluate_model(central, run.test_ds) if run.test_ds is not None else {},
    }
    if out_dir or exp.out_dir:
        fed_dir = (Path(out_dir) if out_dir else exp.resolved_out_dir()) / "fedavg"
        fed_dir.mkdir(parents=True, exist_ok=True)
        torch.save(central.state_dict(), fed_dir / "central.pt")
        ledger.save(fed_dir / "ledger.json")
        write_json_atomic(fed_dir / "report.json", report)
    return central, ledger, report
