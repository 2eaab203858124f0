"""Task metrics, the weighted cross-domain risk bound, and metric reports."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import rankdata

from .utils import write_json_atomic

PSNR_CAP_DB = 99.0  # sentinel for identical images


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    return float(np.mean(predictions == labels))


def binary_auc(scores, labels) -> float:
    """Rank-based AUC with midrank tie handling.

    Equals the probability that a random positive outscores a random
    negative (ties count half), so it is invariant to strictly monotone
    score transforms.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(scores, labels):
    """Per-class one-vs-rest AUC plus their mean.

    ``scores`` is (N, C); ``labels`` are integer class ids. Classes without
    both a positive and a negative are reported as absent and excluded from
    the mean, with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        value = binary_auc(scores, labels)
        return {0: value}, value
    per_class: dict[int, float | None] = {}
    valid = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has a single outcome; excluded from mean AUC")
            per_class[c] = None
            continue
        per_class[c] = binary_auc(scores[:, c], pos)
        valid.append(per_class[c])
    mean = float(np.mean(valid)) if valid else float("nan")
    return per_class, mean


def dice(prediction, truth) -> float:
    """Overlap score 2|P∩T| / (|P|+|T|); two empty masks count as 1."""
    p = np.asarray(prediction).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(image, reference, data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window and default constants."""
    x = np.asarray(image, dtype=np.float64).squeeze()
    y = np.asarray(reference, dtype=np.float64).squeeze()
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"need two equal-shaped 2-D images, got {x.shape} vs {y.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    k = _gaussian_kernel()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = convolve2d(x, k, mode="valid")
    mu_y = convolve2d(y, k, mode="valid")
    xx = convolve2d(x * x, k, mode="valid") - mu_x**2
    yy = convolve2d(y * y, k, mode="valid") - mu_y**2
    xy = convolve2d(x * y, k, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def psnr(image, reference, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at a 99 dB sentinel."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(20 * np.log10(data_range) - 10 * np.log10(mse), PSNR_CAP_DB))


def mean_ssim(images, references, data_range: float = 1.0) -> float:
    images = np.asarray(images)
    references = np.asarray(references)
    return float(np.mean([ssim(a, b, data_range) for a, b in zip(images, references)]))


def mean_psnr(images, references, data_range: float = 1.0) -> float:
    images = np.asarray(images)
    references = np.asarray(references)
    return float(np.mean([psnr(a, b, data_range) for a, b in zip(images, references)]))


# ---------------------------------------------------------------------------
# cross-domain risk bound


def weighted_generalization_bound(eps_local, divergences, weights, d: int, N: int,
                                  delta: float, lam: float = 0.0) -> dict:
    """Upper bound on central-model risk from per-node risks and domain gaps.

    The bound is the weighted local risk, plus half the weighted divergences,
    plus a capacity term 4*sqrt((2d*log(2N) + log(2/delta)) / N), plus the
    (user-supplied, uncomputable) ideal joint risk ``lam``. Returns the total
    and the individual terms so monotonicity can be inspected.
    """
    eps_local = np.asarray(eps_local, dtype=np.float64)
    divergences = np.asarray(divergences, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (len(eps_local) == len(divergences) == len(weights)):
        raise ValueError("eps_local, divergences and weights must have equal length")
    if not np.isclose(weights.sum(), 1.0, atol=1e-9) or (weights < 0).any():
        raise ValueError("weights must be nonnegative and sum to 1")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if N < 1:
        raise ValueError("N must be >= 1")
    if d < 1:
        raise ValueError("VC dimension d must be >= 1")
    risk = float(weights @ eps_local)
    divergence_term = float(weights @ (0.5 * divergences))
    capacity_term = float(4 * np.sqrt((2 * d * np.log(2 * N) + np.log(2 / delta)) / N))
    total = risk + divergence_term + capacity_term + lam
    return {
        "total": total,
        "risk_term": risk,
        "divergence_term": divergence_term,
        "capacity_term": capacity_term,
        "lambda": lam,
    }


def proxy_divergence(features_a, features_b, seed: int = 0) -> float:
    """Proxy distribution distance from a linear domain classifier.

    Trains logistic regression to separate the two feature samples and maps
    its held-out error to 2*(1 - 2*err), clipped to [0, 2]: ~0 for identical
    distributions, ~2 for perfectly separable ones.
    """
    from sklearn.linear_model import LogisticRegression

    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) < 4 or len(b) < 4:
        raise ValueError("need two 2-D feature samples with at least 4 rows each")
    rng = np.random.default_rng(seed)
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    half = len(x) // 2
    clf = LogisticRegression(max_iter=1000, random_state=0)
    clf.fit(x[:half], y[:half])
    err = float(np.mean(clf.predict(x[half:]) != y[half:]))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-class and mean metrics for one evaluated model."""

    task: str
    metrics: dict
    per_class: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for name, values in self.per_class.items():
            vals = [v for v in values.values() if v is not None]
            if vals:
                mean_key = f"mean_{name}"
                if mean_key in self.metrics:
                    if abs(self.metrics[mean_key] - float(np.mean(vals))) > 1e-9:
                        raise ValueError(f"{mean_key} disagrees with per-class values")
                else:
                    self.metrics[mean_key] = float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "per_class": {k: {str(c): v for c, v in d.items()} for k, d in self.per_class.items()},
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())


def classification_report(logits, labels, seed: int = 0, cfg_hash: str = "") -> MetricReport:
    per_class_auc, mean_auc = auc(logits, labels)
    return MetricReport(
        task="classification",
        metrics={"accuracy": accuracy(logits, labels), "mean_auc": mean_auc},
        per_class={"auc": per_class_auc},
        seed=seed,
        config_hash=cfg_hash,
    )


def reconstruction_report(outputs, targets, data_range: float = 1.0, seed: int = 0,
                          cfg_hash: str = "") -> MetricReport:
    return MetricReport(
        task="reconstruction",
        metrics={
            "ssim": mean_ssim(outputs, targets, data_range),
            "psnr": mean_psnr(outputs, targets, data_range),
        },
        seed=seed,
        config_hash=cfg_hash,
    )


def segmentation_report(pred_masks, truth_masks, num_classes: int, seed: int = 0,
                        cfg_hash: str = "") -> MetricReport:
    pred_masks = np.asarray(pred_masks)
    truth_masks = np.asarray(truth_masks)
    per_class = {}
    for c in range(1, num_classes):  # skip background
        per_class[c] = float(np.mean([dice(p == c, t == c) for p, t in zip(pred_masks, truth_masks)]))
    return MetricReport(
        task="segmentation",
        metrics={"mean_dice": float(np.mean(list(per_class.values())))},
        per_class={"dice": per_class},
        seed=seed,
        config_hash=cfg_hash,
    )
