"""Teacher output aggregation and output-space distillation losses.

Teacher logits are combined with importance weights reflecting how much of
each class (or how much data overall) a node actually trained on. The
default output objective matches logits in the l2 sense, which is what
softened-KL distillation converges to at high temperature; the KL form is
kept behind a switch for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .utils import read_json, write_json_atomic


@dataclass
class ImportanceWeights:
    """Per-node (and optionally per-class) normalized ensemble weights.

    ``values`` is (K,) for node-size weighting or (K, C) for class-specific
    weighting. Classes no node ever saw fall back to uniform 1/K and are
    listed in ``flagged_classes``.
    """

    values: np.ndarray
    basis: str  # "class_counts" | "node_sizes" | "uniform"
    flagged_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("weights must be nonnegative")
        sums = self.values.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError(f"weights must normalize to 1 per column, got sums {sums}")

    @property
    def per_class(self) -> bool:
        return self.values.ndim == 2

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "basis": self.basis,
            "flagged_classes": list(self.flagged_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceWeights":
        return cls(np.asarray(d["values"]), d["basis"], list(d.get("flagged_classes", [])))


def class_importance_weights(class_counts) -> ImportanceWeights:
    """Columnwise-normalized per-node per-class counts.

    ``class_counts[k][c]`` is how many class-c samples node k trained on.
    Zero-count columns (no node saw the class) get uniform 1/K and a flag.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 2:
        raise ValueError(f"class_counts must be K x C, got shape {counts.shape}")
    if (counts < 0).any():
        raise ValueError("class counts must be nonnegative")
    k = counts.shape[0]
    totals = counts.sum(axis=0)
    flagged = [int(c) for c in np.where(totals == 0)[0]]
    safe = np.where(totals > 0, totals, 1.0)
    weights = counts / safe
    weights[:, totals == 0] = 1.0 / k
    return ImportanceWeights(weights, basis="class_counts", flagged_classes=flagged)


def size_weights(sizes) -> ImportanceWeights:
    """Per-node weights proportional to private dataset sizes."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) == 0:
        raise ValueError("sizes must be a non-empty 1-D sequence")
    if (sizes < 1).any():
        raise ValueError("every node must hold at least one sample")
    return ImportanceWeights(sizes / sizes.sum(), basis="node_sizes")


def uniform_weights(num_nodes: int, num_classes: int | None = None) -> ImportanceWeights:
    """The conventional-ensemble average, for ablation against importance weighting."""
    if num_classes is None:
        values = np.full(num_nodes, 1.0 / num_nodes)
    else:
        values = np.full((num_nodes, num_classes), 1.0 / num_nodes)
    return ImportanceWeights(values, basis="uniform")


def weighted_ensemble(predictions, weights: ImportanceWeights) -> np.ndarray:
    """Weighted sum of per-node predictions.

    ``predictions`` stacks K same-shaped arrays; class-specific weights are
    applied along the last-but-batch class axis of (..., C) logits, node-size
    weights apply to the whole prediction.
    """
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in predictions])
    if stack.shape[0] != weights.num_nodes:
        raise ValueError(f"{stack.shape[0]} predictions but {weights.num_nodes} weights")
    if not np.isfinite(stack).all():
        raise ValueError("non-finite predictions")
    if weights.per_class:
        c = weights.values.shape[1]
        if stack.ndim <= 3 and stack.shape[-1] == c:
            w = weights.values.reshape((weights.num_nodes,) + (1,) * (stack.ndim - 2) + (c,))
        elif stack.ndim >= 4 and stack.shape[2] == c:
            # (K, N, C, H, W) segmentation logits: class axis right after batch
            w = weights.values.reshape((weights.num_nodes, 1, c) + (1,) * (stack.ndim - 3))
        else:
            raise ValueError(
                f"per-class weights with C={c} do not match prediction shape {stack.shape[1:]}"
            )
    else:
        w = weights.values.reshape((weights.num_nodes,) + (1,) * (stack.ndim - 1))
    return (stack * w).sum(axis=0)


# ---------------------------------------------------------------------------
# bundles


@dataclass
class EnsembleBundle:
    """Per-sample distillation target: ensemble prediction plus attention bounds."""

    sample_id: int
    z_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class BundleSet:
    """All per-sample bundles for one public dataset, stored as stacked arrays."""

    public_id: str
    task: str
    z_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    weights: ImportanceWeights
    source_products: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.z_hat) == len(self.lower) == len(self.upper)):
            raise ValueError("bundle arrays disagree in sample count")
        if not np.isfinite(self.z_hat).all():
            raise ValueError("non-finite ensemble predictions")
        if (self.lower > self.upper + 1e-6).any():
            raise ValueError("lower bound exceeds upper bound")

    def __len__(self):
        return len(self.z_hat)

    def __getitem__(self, i: int) -> EnsembleBundle:
        return EnsembleBundle(i, self.z_hat[i], self.lower[i], self.upper[i])

    def subset(self, indices) -> "BundleSet":
        idx = np.asarray(indices, dtype=np.int64)
        return BundleSet(self.public_id, self.task, self.z_hat[idx], self.lower[idx],
                         self.upper[idx], self.weights, self.source_products)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, z_hat=self.z_hat, lower=self.lower, upper=self.upper)
        tmp.replace(path)
        write_json_atomic(
            path.with_suffix(".json"),
            {
                "public_id": self.public_id,
                "task": self.task,
                "weights": self.weights.to_dict(),
                "source_products": self.source_products,
                "shapes": {k: list(getattr(self, k).shape) for k in ("z_hat", "lower", "upper")},
            },
        )

    @classmethod
    def load(cls, path) -> "BundleSet":
        path = Path(path)
        meta = read_json(path.with_suffix(".json"))
        arrays = np.load(path)
        return cls(
            public_id=meta["public_id"],
            task=meta["task"],
            z_hat=arrays["z_hat"],
            lower=arrays["lower"],
            upper=arrays["upper"],
            weights=ImportanceWeights.from_dict(meta["weights"]),
            source_products=list(meta.get("source_products", [])),
        )


# ---------------------------------------------------------------------------
# output losses


def _tensor(z) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z
    return torch.as_tensor(np.asarray(z), dtype=torch.float32)


def softened_probs(logits, tau: float) -> torch.Tensor:
    """Temperature-softened softmax over the last axis."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return torch.softmax(_tensor(logits) / tau, dim=-1)


def kl_distill_loss(teacher_logits, student_logits, tau: float) -> torch.Tensor:
    """KL divergence from softened teacher to softened student distributions.

    Nonnegative; zero iff the softened distributions coincide. Batched inputs
    are reduced by the mean per-sample divergence.
    """
    t = _tensor(teacher_logits)
    s = _tensor(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    log_pt = torch.log_softmax(t / tau, dim=-1)
    log_ps = torch.log_softmax(s / tau, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    return kl.mean()


def l2_logit_loss(teacher, student) -> torch.Tensor:
    """Euclidean norm of the teacher-student difference.

    For batched input the per-sample norm is taken over all non-batch dims
    and averaged, so the loss scale is batch-size independent. Image
    predictions therefore get the per-image Frobenius norm.
    """
    t = _tensor(teacher)
    s = _tensor(student)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    diff = s - t
    if diff.dim() <= 1:
        return diff.norm()
    return diff.reshape(diff.shape[0], -1).norm(dim=1).mean()
