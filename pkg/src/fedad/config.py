"""Declarative experiment configuration: schema validation and materialization.

A config is a single JSON or YAML document; every hyperparameter of the
pipeline is surfaced here (temperature, soft-mask sharpness/threshold,
Dirichlet concentration, node count, epochs, public-data subsampling, ...).
Validation runs before any compute and reports offending keys by name.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import LabeledDataset, PublicDataset, generate_from_config, load_dataset
from .distill import TASKS, DistillConfig
from .errors import ConfigError
from .models import registered_architectures
from .utils import config_hash

_DATASET_KINDS = ("synthetic-classification", "synthetic-segmentation", "synthetic-reconstruction")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` keeps the original document."""

    name: str
    task: str
    seed: int
    out_dir: str
    dataset: dict
    public_dataset: dict
    test_dataset: dict
    partition: dict
    node_defaults: dict = field(default_factory=dict)
    nodes: list = field(default_factory=list)
    distill: dict = field(default_factory=dict)
    products: dict = field(default_factory=dict)
    fedavg: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _require(isinstance(doc, dict), "config must be a mapping")
        missing = [k for k in ("name", "task", "dataset", "public_dataset", "partition") if k not in doc]
        _require(not missing, f"config is missing required keys: {missing}")
        cfg = cls(
            name=str(doc["name"]),
            task=str(doc["task"]),
            seed=int(doc.get("seed", 0)),
            out_dir=str(doc.get("out_dir", "runs/" + str(doc["name"]))),
            dataset=dict(doc["dataset"]),
            public_dataset=dict(doc["public_dataset"]),
            test_dataset=dict(doc.get("test_dataset", {})),
            partition=dict(doc["partition"]),
            node_defaults=dict(doc.get("node_defaults", {})),
            nodes=list(doc.get("nodes", [])),
            distill=dict(doc.get("distill", {})),
            products=dict(doc.get("products", {})),
            fedavg=dict(doc.get("fedavg", {})),
            raw=copy.deepcopy(doc),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text)
        else:
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        _require(self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}")
        self._validate_dataset_spec("dataset", self.dataset)
        self._validate_dataset_spec("public_dataset", self.public_dataset)
        if self.test_dataset:
            self._validate_dataset_spec("test_dataset", self.test_dataset)

        p = self.partition
        _require("num_nodes" in p, "partition.num_nodes is required")
        _require(int(p["num_nodes"]) >= 1, f"partition.num_nodes must be >= 1, got {p['num_nodes']}")
        if "fractions" in p:
            fr = p["fractions"]
            _require(len(fr) == int(p["num_nodes"]), "partition.fractions length must equal num_nodes")
            _require(all(f > 0 for f in fr), "partition.fractions must be positive")
        else:
            _require("alpha" in p, "partition.alpha is required for Dirichlet partitioning")
            _require(float(p["alpha"]) > 0, f"partition.alpha must be > 0, got {p['alpha']}")
        hf = float(p.get("holdout_fraction", 0.0))
        _require(0.0 <= hf < 1.0, f"partition.holdout_fraction must lie in [0, 1), got {hf}")

        if self.nodes:
            _require(len(self.nodes) == int(p["num_nodes"]),
                     f"nodes lists {len(self.nodes)} entries but num_nodes={p['num_nodes']}")
        for i, node in enumerate(self.nodes):
            arch = node.get("architecture", self.node_defaults.get("architecture", "cnn-small"))
            _require(_arch_known(arch), f"nodes[{i}].architecture {arch!r} is not registered")

        d = self.distill
        arch = d.get("student_architecture", "cnn-small")
        _require(_arch_known(arch), f"distill.student_architecture {arch!r} is not registered")
        try:
            self.distill_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"distill: {exc}") from exc
        sub = d.get("public_subset")
        _require(sub is None or 0 < float(sub) <= 1.0,
                 "distill.public_subset must lie in (0, 1] when given")
        mode = self.products.get("attention_classes", "all")
        _require(mode in ("all", "top1"), f"products.attention_classes must be all|top1, got {mode!r}")
        if self.fedavg:
            _require(int(self.fedavg.get("rounds", 1)) >= 1, "fedavg.rounds must be >= 1")
            _require(int(self.fedavg.get("local_epochs", 1)) >= 0, "fedavg.local_epochs must be >= 0")

    def _validate_dataset_spec(self, label: str, spec: dict) -> None:
        _require(isinstance(spec, dict) and spec, f"{label} must be a non-empty mapping")
        if "path" in spec:
            _require(spec.get("format") in ("synthetic", "image-dir", "npz"),
                     f"{label}.format must be synthetic|image-dir|npz")
            return
        kind = spec.get("kind")
        _require(kind in _DATASET_KINDS, f"{label}.kind must be one of {_DATASET_KINDS}, got {kind!r}")
        _require(int(spec.get("num_samples", 0)) >= 1, f"{label}.num_samples must be >= 1")

    # -- derived values -----------------------------------------------------

    def hash(self) -> str:
        return config_hash(self.raw)

    def resolved_out_dir(self) -> Path:
        root = os.environ.get("FEDAD_OUTPUT_ROOT")
        out = Path(self.out_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def num_nodes(self) -> int:
        return int(self.partition["num_nodes"])

    def node_dict(self, k: int) -> dict:
        merged = dict(self.node_defaults)
        if self.nodes:
            merged.update(self.nodes[k])
        merged.setdefault("architecture", "cnn-small" if self.task != "reconstruction" else "unet-tiny")
        return merged

    def distill_config(self) -> DistillConfig:
        d = dict(self.distill)
        d.pop("student_architecture", None)
        d.pop("public_subset", None)
        d.pop("uniform_ensemble", None)
        d.setdefault("task", self.task)
        d.setdefault("seed", self.seed + 6)
        if self.task == "reconstruction":
            d.setdefault("optimizer", "rmsprop")
            d.setdefault("lr", 1e-4)
        return DistillConfig(**d)

    def student_architecture(self) -> str:
        default = "cnn-small" if self.task != "reconstruction" else "unet-tiny+nonlocal"
        return self.distill.get("student_architecture", default)

    # -- materialization ----------------------------------------------------

    def _load(self, spec: dict, labeled: bool):
        spec = dict(spec)
        if "path" in spec:
            ds = load_dataset(spec["path"], spec["format"])
        else:
            spec.setdefault("labeled", labeled)
            ds = generate_from_config(spec)
        if labeled and not isinstance(ds, LabeledDataset):
            raise ConfigError("expected a labeled dataset but got an unlabeled one")
        if not labeled and isinstance(ds, LabeledDataset):
            ds = ds.as_public()
        return ds

    def materialize(self) -> tuple[LabeledDataset, PublicDataset, LabeledDataset | None]:
        train = self._load(self.dataset, labeled=True)
        public = self._load(self.public_dataset, labeled=False)
        test = self._load(self.test_dataset, labeled=True) if self.test_dataset else None
        if train.task != self.task:
            raise ConfigError(f"dataset task {train.task!r} does not match config task {self.task!r}")
        return train, public, test


def _arch_known(arch: str) -> bool:
    try:
        return arch in registered_architectures() or arch.split("+")[0] in [
            a.split("+")[0] for a in registered_architectures()
        ]
    except Exception:
        return False
