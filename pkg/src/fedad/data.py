"""Dataset containers, ingestion formats and synthetic toy generators.

Everything is normalized to the framework layout: images are float32 arrays
shaped (N, 1, H, W) with values in [0, 1]; classification labels are int64
(N,); segmentation targets are int64 masks (N, H, W); reconstruction targets
are clean float32 images (N, 1, H, W) paired with corrupted inputs.

Supported ingestion formats:
  * "synthetic"  - JSON generator config (see ``generate_from_config``)
  * "image-dir"  - directory of images + CSV manifest with columns filename,label
  * "npz"        - array archive with keys "images" and (optionally) "labels"
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .utils import array_checksum


@dataclass
class PublicDataset:
    """Unlabeled inputs shared by all parties; sample order is fixed and hashed."""

    images: np.ndarray
    id: str = ""
    modality: str = "synthetic"

    def __post_init__(self):
        self.images = _as_image_stack(self.images)
        if not self.id:
            self.id = array_checksum(self.images)

    def __len__(self):
        return self.images.shape[0]


@dataclass
class LabeledDataset:
    """Inputs plus task targets: class ids, masks, or clean reference images."""

    images: np.ndarray
    targets: np.ndarray
    task: str = "classification"
    id: str = ""
    modality: str = "synthetic"

    def __post_init__(self):
        self.images = _as_image_stack(self.images)
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        elif self.task == "segmentation":
            self.targets = np.asarray(self.targets, dtype=np.int64)
        elif self.task == "reconstruction":
            self.targets = _as_image_stack(self.targets)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.targets) != len(self.images):
            raise ValueError("images and targets disagree in length")
        if not self.id:
            self.id = array_checksum(self.images, self.targets)

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        if self.task == "reconstruction":
            raise ValueError("reconstruction datasets have no classes")
        return int(self.targets.max()) + 1

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.targets[idx], task=self.task, modality=self.modality
        )

    def as_public(self) -> PublicDataset:
        return PublicDataset(self.images.copy(), modality=self.modality)


def _as_image_stack(images) -> np.ndarray:
    a = np.asarray(images)
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float32) / 255.0
    a = a.astype(np.float32, copy=False)
    if a.ndim == 2:  # single image
        a = a[None, None]
    elif a.ndim == 3:  # (N, H, W)
        a = a[:, None]
    elif a.ndim != 4:
        raise ValueError(f"cannot interpret image array with shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("non-finite pixel values")
    return np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# synthetic generators


def _class_anchors(num_classes: int, image_size: int, patch: int) -> np.ndarray:
    """Evenly spaced anchor positions, one per class, on a coarse grid."""
    cols = int(np.ceil(np.sqrt(num_classes)))
    rows = int(np.ceil(num_classes / cols))
    ys = np.linspace(1, image_size - patch - 1, rows).round().astype(int)
    xs = np.linspace(1, image_size - patch - 1, cols).round().astype(int)
    anchors = [(y, x) for y in ys for x in xs]
    return np.asarray(anchors[:num_classes])


def make_classification(
    num_samples: int,
    num_classes: int = 10,
    image_size: int = 28,
    seed: int = 0,
    noise: float = 0.15,
    distractor_prob: float = 0.7,
    patch: int = 7,
    jitter: int = 1,
    patch_intensity: tuple = (0.75, 0.95),
    distractor_intensity: tuple = (0.30, 0.45),
):
    """Toy images: a bright class-specific patch plus optional dimmer distractor
    patches at other classes' locations, over a noisy background.

    Difficulty knobs: raise ``noise``/``jitter`` and let the intensity ranges
    overlap to make single-view classification genuinely ambiguous.
    """
    rng = np.random.default_rng(seed)
    anchors = _class_anchors(num_classes, image_size, patch)
    labels = rng.integers(num_classes, size=num_samples)
    images = rng.normal(0.1, noise, size=(num_samples, image_size, image_size))

    def stamp(img, cls, intensity):
        jy, jx = rng.integers(-jitter, jitter + 1, size=2)
        y = int(np.clip(anchors[cls, 0] + jy, 0, image_size - patch))
        x = int(np.clip(anchors[cls, 1] + jx, 0, image_size - patch))
        img[y : y + patch, x : x + patch] += intensity

    for i in range(num_samples):
        stamp(images[i], int(labels[i]), rng.uniform(*patch_intensity))
        if rng.random() < distractor_prob:
            other = int((labels[i] + rng.integers(1, num_classes)) % num_classes)
            stamp(images[i], other, rng.uniform(*distractor_intensity))

    images = np.clip(images, 0.0, 1.5).astype(np.float32)
    return images[:, None], labels.astype(np.int64)


def make_segmentation(num_samples: int, image_size: int = 24, seed: int = 0, noise: float = 0.1):
    """Noisy images with one bright ellipse; mask = 1 inside the ellipse."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = rng.normal(0.15, noise, size=(num_samples, image_size, image_size))
    masks = np.zeros((num_samples, image_size, image_size), dtype=np.int64)
    for i in range(num_samples):
        cy, cx = rng.uniform(image_size * 0.25, image_size * 0.75, size=2)
        ry, rx = rng.uniform(image_size * 0.12, image_size * 0.3, size=2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        images[i][inside] += rng.uniform(0.5, 0.8)
        masks[i][inside] = 1
    images = np.clip(images, 0.0, 1.5).astype(np.float32)
    return images[:, None], masks


def make_phantoms(num_samples: int, image_size: int = 32, seed: int = 0):
    """Smooth phantom-like images built from a few random ellipses."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    out = np.zeros((num_samples, image_size, image_size), dtype=np.float64)
    for i in range(num_samples):
        img = np.zeros((image_size, image_size))
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(image_size * 0.15, image_size * 0.85, size=2)
            ry, rx = rng.uniform(image_size * 0.08, image_size * 0.35, size=2)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(theta) + dx * np.sin(theta)
            v = -dy * np.sin(theta) + dx * np.cos(theta)
            inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
            img[inside] += rng.uniform(0.25, 0.8)
        img = gaussian_filter(img, sigma=0.8)
        peak = img.max()
        if peak > 0:
            img /= peak
        out[i] = img
    return out.astype(np.float32)[:, None]


@dataclass
class UndersamplingConfig:
    """Frequency-domain corruption: keep only a fraction of k-space columns."""

    acceleration: float = 4.0
    center_fraction: float = 0.08
    seed: int = 0


def undersampling_mask(width: int, cfg: UndersamplingConfig) -> np.ndarray:
    """Boolean column mask keeping ~width/acceleration columns, center always kept."""
    if cfg.acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    n_keep = max(1, int(round(width / cfg.acceleration)))
    n_center = max(1, int(round(width * cfg.center_fraction)))
    n_center = min(n_center, n_keep)
    mask = np.zeros(width, dtype=bool)
    center = width // 2
    lo = center - n_center // 2
    mask[lo : lo + n_center] = True
    remaining = np.where(~mask)[0]
    extra = n_keep - mask.sum()
    if extra > 0:
        mask[rng.choice(remaining, size=min(extra, len(remaining)), replace=False)] = True
    return np.fft.ifftshift(mask)


def undersample(images: np.ndarray, cfg: UndersamplingConfig) -> np.ndarray:
    """Apply the column mask in the 2-D Fourier domain; returns magnitude images."""
    images = _as_image_stack(images)
    mask = undersampling_mask(images.shape[-1], cfg)
    spectrum = np.fft.fft2(images)
    spectrum[..., :, ~mask] = 0
    corrupted = np.abs(np.fft.ifft2(spectrum)).astype(np.float32)
    return corrupted


def make_reconstruction(
    num_samples: int,
    image_size: int = 32,
    seed: int = 0,
    corruption: UndersamplingConfig | None = None,
):
    """(corrupted input, clean target) pairs from synthetic phantoms."""
    corruption = corruption or UndersamplingConfig()
    clean = make_phantoms(num_samples, image_size, seed)
    corrupted = undersample(clean, corruption)
    return corrupted, clean


# ---------------------------------------------------------------------------
# ingestion


def generate_from_config(cfg: dict):
    """Build a dataset from a generator config dict (see bundled toy configs)."""
    kind = cfg.get("kind")
    labeled = bool(cfg.get("labeled", True))
    if kind == "synthetic-classification":
        images, labels = make_classification(
            num_samples=int(cfg["num_samples"]),
            num_classes=int(cfg.get("num_classes", 10)),
            image_size=int(cfg.get("image_size", 28)),
            seed=int(cfg.get("seed", 0)),
            noise=float(cfg.get("noise", 0.15)),
            distractor_prob=float(cfg.get("distractor_prob", 0.7)),
            jitter=int(cfg.get("jitter", 1)),
            patch_intensity=tuple(cfg.get("patch_intensity", (0.75, 0.95))),
            distractor_intensity=tuple(cfg.get("distractor_intensity", (0.30, 0.45))),
        )
        if not labeled:
            return PublicDataset(images)
        return LabeledDataset(images, labels, task="classification")
    if kind == "synthetic-segmentation":
        images, masks = make_segmentation(
            num_samples=int(cfg["num_samples"]),
            image_size=int(cfg.get("image_size", 24)),
            seed=int(cfg.get("seed", 0)),
            noise=float(cfg.get("noise", 0.1)),
        )
        if not labeled:
            return PublicDataset(images)
        return LabeledDataset(images, masks, task="segmentation")
    if kind == "synthetic-reconstruction":
        corr_cfg = cfg.get("corruption", {})
        corruption = UndersamplingConfig(
            acceleration=float(corr_cfg.get("acceleration", 4.0)),
            center_fraction=float(corr_cfg.get("center_fraction", 0.08)),
            seed=int(corr_cfg.get("seed", cfg.get("seed", 0))),
        )
        corrupted, clean = make_reconstruction(
            num_samples=int(cfg["num_samples"]),
            image_size=int(cfg.get("image_size", 32)),
            seed=int(cfg.get("seed", 0)),
            corruption=corruption,
        )
        if not labeled:
            return PublicDataset(corrupted)
        return LabeledDataset(corrupted, clean, task="reconstruction")
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def _load_image_dir(path: Path) -> LabeledDataset:
    from PIL import Image

    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"label manifest not found: {manifest}")
    images, labels = [], []
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise ValueError("manifest must have columns: filename,label")
        for rownum, row in enumerate(reader, start=2):
            name, label = row.get("filename"), row.get("label")
            if not name or label is None:
                raise ValueError(f"manifest row {rownum}: missing filename or label")
            try:
                labels.append(int(label))
            except ValueError:
                raise ValueError(f"manifest row {rownum}: non-integer label {label!r}") from None
            img_path = path / name
            if not img_path.exists():
                raise ValueError(f"manifest row {rownum}: image not found: {img_path}")
            img = np.asarray(Image.open(img_path).convert("L"))
            images.append(img)
    if not images:
        raise ValueError(f"manifest {manifest} lists no samples")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"images disagree in shape: {sorted(shapes)}")
    return LabeledDataset(np.stack(images), np.asarray(labels), task="classification")


def _load_npz(path: Path):
    archive = np.load(path)
    if "images" not in archive:
        raise ValueError(f"{path}: archive must contain an 'images' key")
    images = archive["images"]
    if "labels" in archive:
        return LabeledDataset(images, archive["labels"], task="classification")
    return PublicDataset(images)


def load_dataset(path, format: str):
    """Load a dataset in one of the documented ingestion formats."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if format == "synthetic":
        with open(path) as f:
            return generate_from_config(json.load(f))
    if format == "image-dir":
        return _load_image_dir(path)
    if format == "npz":
        return _load_npz(path)
    raise ValueError(f"unknown dataset format {format!r} (expected synthetic|image-dir|npz)")
