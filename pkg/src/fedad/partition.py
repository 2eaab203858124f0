"""Reproducible non-IID federated splits.

Private training indices are apportioned to nodes class by class: for every
class one set of node proportions is drawn from a symmetric Dirichlet with
concentration ``alpha``, and the class's samples are handed out by those
proportions. Lower ``alpha`` means more skew; ``alpha -> inf`` approaches a
uniform split. A validation holdout is carved out beforehand so node slices
never overlap the validation set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .utils import config_hash, read_json, write_json_atomic


@dataclass
class PartitionSpec:
    """Deterministic assignment of sample indices to ``num_nodes`` nodes.

    ``assignments[k]`` lists the (global) sample indices held by node k;
    ``class_counts[k][c]`` counts node k's samples with label c.
    """

    num_nodes: int
    alpha: float
    seed: int
    assignments: list[list[int]]
    class_counts: list[list[int]]
    backfilled_nodes: list[int] = field(default_factory=list)

    @property
    def node_sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def validate(self, labels: np.ndarray | None = None) -> None:
        """Check the set-partition and count invariants; raises ValueError."""
        flat = np.concatenate([np.asarray(a, dtype=np.int64) for a in self.assignments])
        if len(flat) != len(set(flat.tolist())):
            raise ValueError("assignments overlap: some index appears twice")
        counts = np.asarray(self.class_counts)
        if (counts < 0).any():
            raise ValueError("negative class count")
        if [int(r) for r in counts.sum(axis=1)] != self.node_sizes:
            raise ValueError("class_counts row sums do not match node sizes")
        if labels is not None:
            labels = np.asarray(labels)
            if sorted(flat.tolist()) != sorted(range(len(labels))):
                raise ValueError("assignments do not partition the index set")
            for k, idx in enumerate(self.assignments):
                got = np.bincount(labels[np.asarray(idx, dtype=np.int64)], minlength=counts.shape[1])
                if not np.array_equal(got, counts[k]):
                    raise ValueError(f"class_counts[{k}] disagree with labels")

    def to_dict(self) -> dict:
        return {
            "K": self.num_nodes,
            "alpha": self.alpha,
            "seed": self.seed,
            "assignments": [list(map(int, a)) for a in self.assignments],
            "class_counts": [list(map(int, r)) for r in self.class_counts],
            "backfilled_nodes": list(self.backfilled_nodes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        return cls(
            num_nodes=int(d["K"]),
            alpha=float(d["alpha"]),
            seed=int(d["seed"]),
            assignments=[list(map(int, a)) for a in d["assignments"]],
            class_counts=[list(map(int, r)) for r in d["class_counts"]],
            backfilled_nodes=list(d.get("backfilled_nodes", [])),
        )

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "PartitionSpec":
        return cls.from_dict(read_json(path))

    def spec_hash(self) -> str:
        return config_hash(self.to_dict())


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that respect fractional quotas.

    Floors the quotas, then hands the leftover units to the largest
    fractional remainders (ties broken by node index, deterministically).
    """
    base = np.floor(quotas).astype(np.int64)
    remainder = int(total - base.sum())
    if remainder > 0:
        frac = quotas - base
        order = np.lexsort((np.arange(len(quotas)), -frac))
        base[order[:remainder]] += 1
    return base


def dirichlet_partition(labels, num_nodes: int, alpha: float, seed: int) -> PartitionSpec:
    """Split sample indices across ``num_nodes`` nodes, one Dirichlet draw per class.

    Each node is guaranteed at least one sample: nodes left empty under
    extreme skew are backfilled with one random sample from the largest node.

    Args:
        labels: per-sample integer class ids (anything array-like, 1-D).
        num_nodes: number of federated nodes K, >= 1.
        alpha: Dirichlet concentration, > 0.
        seed: RNG seed; identical inputs reproduce identical assignments.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("labels must be a non-empty 1-D sequence of class ids")
    if num_nodes < 1:
        raise ValueError(f"num_nodes must be >= 1, got {num_nodes}")
    if num_nodes > len(labels):
        raise ValueError(f"num_nodes={num_nodes} exceeds dataset size {len(labels)}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")

    rng = np.random.default_rng(seed)
    num_classes = int(labels.max()) + 1
    assignments: list[list[int]] = [[] for _ in range(num_nodes)]

    for c in range(num_classes):
        idx = np.where(labels == c)[0]
        if len(idx) == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_nodes, alpha))
        counts = _largest_remainder(props * len(idx), len(idx))
        start = 0
        for k in range(num_nodes):
            assignments[k].extend(idx[start : start + counts[k]].tolist())
            start += counts[k]

    # Every node must be able to train: move one sample from the largest node
    # into each empty one.
    backfilled = []
    for k in range(num_nodes):
        if not assignments[k]:
            donor = int(np.argmax([len(a) for a in assignments]))
            take = int(rng.integers(len(assignments[donor])))
            assignments[k].append(assignments[donor].pop(take))
            backfilled.append(k)

    class_counts = [
        np.bincount(labels[np.asarray(a, dtype=np.int64)], minlength=num_classes).tolist()
        for a in assignments
    ]
    spec = PartitionSpec(
        num_nodes=num_nodes,
        alpha=float(alpha),
        seed=int(seed),
        assignments=[sorted(a) for a in assignments],
        class_counts=class_counts,
        backfilled_nodes=backfilled,
    )
    spec.validate(labels)
    return spec


def holdout_validation(train_indices, fraction: float, seed: int):
    """Split indices into (train_subset, validation_subset).

    Validation size is round(fraction * N); a degenerate split (empty
    validation or empty train) is rejected.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    idx = np.asarray(train_indices, dtype=np.int64)
    n_val = int(round(fraction * len(idx)))
    if n_val == 0:
        raise ValueError(
            f"holdout of {fraction} over {len(idx)} samples rounds to an empty validation set"
        )
    if n_val >= len(idx):
        raise ValueError("holdout would consume the entire training set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(idx))
    val = np.sort(idx[perm[:n_val]])
    train = np.sort(idx[perm[n_val:]])
    return train, val


def fraction_partition(num_samples: int, fractions, seed: int) -> PartitionSpec:
    """Split indices by explicit per-node fractions (for unlabeled tasks).

    Fractions are normalized and converted to counts by largest remainder.
    The resulting spec uses a single pseudo-class, so its class_counts column
    holds the node sizes; ``alpha`` is stored as 0.0 to mark the mode.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) == 0:
        raise ValueError("fractions must be a non-empty 1-D sequence")
    if (fractions <= 0).any():
        raise ValueError("fractions must be positive")
    if len(fractions) > num_samples:
        raise ValueError("more nodes than samples")
    fractions = fractions / fractions.sum()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_samples)
    counts = _largest_remainder(fractions * num_samples, num_samples)
    # keep every node non-empty
    while (counts == 0).any():
        counts[int(np.argmin(counts))] += 1
        counts[int(np.argmax(counts))] -= 1
    assignments, start = [], 0
    for c in counts:
        assignments.append(sorted(perm[start : start + c].tolist()))
        start += c
    spec = PartitionSpec(
        num_nodes=len(fractions),
        alpha=0.0,
        seed=int(seed),
        assignments=assignments,
        class_counts=[[len(a)] for a in assignments],
    )
    spec.validate()
    return spec


def max_class_share(spec: PartitionSpec) -> float:
    """Mean over nodes of the dominant class's share, a non-IID-ness gauge."""
    counts = np.asarray(spec.class_counts, dtype=np.float64)
    sizes = counts.sum(axis=1)
    return float(np.mean(counts.max(axis=1) / np.maximum(sizes, 1)))
