"""Central student training against frozen ensemble targets.

The student never sees private data or teacher parameters: every target it
trains on (ensemble predictions, attention bounds) comes from a bundle built
out of teacher inference products on the shared public data. Classification
students get their attention through a differentiable gradient-based map, so
the bound losses reach the parameters via double backprop; reconstruction
students expose non-local attention directly from the forward pass.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .attention import (
    GradCAM,
    SoftMaskParams,
    lower_bound_loss,
    segmentation_attention,
    upper_bound_loss,
)
from .data import PublicDataset
from .ensemble import BundleSet, kl_distill_loss, l2_logit_loss
from .utils import config_hash, seed_everything, write_json_atomic

TASKS = ("classification", "segmentation", "reconstruction")


@dataclass
class DistillConfig:
    """Hyperparameters of the central distillation stage."""

    task: str = "classification"
    tau: float = 3.0
    epochs: int = 2
    batch_size: int = 64
    max_steps: int | None = None
    optimizer: str = "sgd-cosine"  # sgd-cosine | sgd | rmsprop | adam
    lr: float = 1e-2
    lr_end: float = 1e-3
    momentum: float = 0.9
    use_lower: bool = True
    use_upper: bool = True
    use_kl: bool = False  # switch the output term from l2 logit matching to softened KL
    rho: float = 8.0
    b: float = 0.5
    normalized_bounds: bool = False
    output_weight: float = 1.0
    lower_weight: float = 1.0
    upper_weight: float = 1.0
    one_shot: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def mask_params(self) -> SoftMaskParams:
        return SoftMaskParams(rho=self.rho, b=self.b)

    def hash(self) -> str:
        return config_hash(asdict(self))


@dataclass
class StudentState:
    """Student model plus step counter and per-step loss history."""

    model: torch.nn.Module
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def record(self, row: dict) -> None:
        self.history.append(row)
        self.step += 1

    def save_history(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "total", "L_w", "L_low", "L_up"])
            for row in self.history:
                writer.writerow([row["step"], row["total"], row["output"], row["lower"], row["upper"]])

    def save_checkpoint(self, path, cfg: DistillConfig) -> None:
        torch.save(self.model.state_dict(), path)
        last = self.history[-1] if self.history else {}
        write_json_atomic(
            str(path) + ".json",
            {"config_hash": cfg.hash(), "step": self.step,
             "losses": {k: last.get(k) for k in ("total", "output", "lower", "upper")}},
        )


def _bound_terms(student_maps, lower, upper, cfg: DistillConfig):
    params = cfg.mask_params
    zero = torch.zeros(())
    low = lower_bound_loss(student_maps, lower, params, cfg.normalized_bounds) if cfg.use_lower else None
    up = upper_bound_loss(student_maps, upper, params, cfg.normalized_bounds) if cfg.use_upper else None
    flags = {
        "degenerate_consensus": low.degenerate_fraction if low else 0.0,
        "zero_student_attention": up.degenerate_fraction if up else 0.0,
    }
    return (low.value if low else zero), (up.value if up else zero), flags


def classification_loss(student_logits, student_maps, bundle_z, bundle_lower, bundle_upper,
                        cfg: DistillConfig):
    """Per-class mean of output loss plus both attention-bound losses.

    ``student_maps`` may be None when both bound toggles are off. Returns
    (total, breakdown) where the breakdown terms sum to the total.
    """
    ens = torch.as_tensor(np.asarray(bundle_z), dtype=torch.float32)
    if cfg.use_kl:
        out = kl_distill_loss(ens, student_logits, cfg.tau)
    elif student_logits.dim() == 4:
        # per-pixel logits: per-class Frobenius norm, then class and batch mean
        out = (student_logits - ens).flatten(2).norm(dim=2).mean()
    else:
        out = (student_logits - ens).abs().mean()
    if cfg.use_lower or cfg.use_upper:
        lo = torch.as_tensor(np.asarray(bundle_lower), dtype=torch.float32)
        hi = torch.as_tensor(np.asarray(bundle_upper), dtype=torch.float32)
        low, up, flags = _bound_terms(student_maps, lo, hi, cfg)
    else:
        low, up, flags = torch.zeros(()), torch.zeros(()), {}
    total = cfg.output_weight * out + cfg.lower_weight * low + cfg.upper_weight * up
    breakdown = {"total": float(total.detach()), "output": float(out.detach()),
                 "lower": float(low.detach()), "upper": float(up.detach()), **flags}
    return total, breakdown


def reconstruction_loss(student_images, student_attention, bundle_z, bundle_lower, bundle_upper,
                        cfg: DistillConfig):
    """Per-image Frobenius output loss plus attention bounds on non-local maps."""
    ens = torch.as_tensor(np.asarray(bundle_z), dtype=torch.float32)
    out = l2_logit_loss(ens, student_images)
    if cfg.use_lower or cfg.use_upper:
        lo = torch.as_tensor(np.asarray(bundle_lower), dtype=torch.float32)
        hi = torch.as_tensor(np.asarray(bundle_upper), dtype=torch.float32)
        low, up, flags = _bound_terms(student_attention, lo, hi, cfg)
    else:
        low, up, flags = torch.zeros(()), torch.zeros(()), {}
    total = cfg.output_weight * out + cfg.lower_weight * low + cfg.upper_weight * up
    breakdown = {"total": float(total.detach()), "output": float(out.detach()),
                 "lower": float(low.detach()), "upper": float(up.detach()), **flags}
    return total, breakdown


def _student_outputs(model, x, cfg: DistillConfig, cam: GradCAM | None):
    """Forward the student and produce (predictions, attention) for its task."""
    if cfg.task == "classification":
        if cam is not None and (cfg.use_lower or cfg.use_upper):
            logits, maps = cam.all_class_maps(x, create_graph=True)
            return logits, maps
        return model(x), None
    if cfg.task == "segmentation":
        logits = model(x)
        maps = segmentation_attention(logits, cfg.tau) if (cfg.use_lower or cfg.use_upper) else None
        return logits, maps
    out = model(x)
    att = model.spatial_attention() if (cfg.use_lower or cfg.use_upper) else None
    return out, att


def build_optimizer(model, cfg: DistillConfig, total_steps: int):
    name = cfg.optimizer
    if name == "sgd-cosine":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1),
                                                           eta_min=cfg.lr_end)
        return opt, sched
    if name == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum), None
    if name == "rmsprop":
        return torch.optim.RMSprop(model.parameters(), lr=cfg.lr), None
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr), None
    raise ValueError(f"unknown optimizer {name!r}")


def distill_epoch(state: StudentState, public: PublicDataset, bundles: BundleSet,
                  cfg: DistillConfig, optimizer, scheduler=None, epoch: int = 0,
                  cam: GradCAM | None = None) -> StudentState:
    """One gradient pass over the public data against precomputed bundles."""
    if bundles.public_id != public.id:
        raise ValueError(
            f"bundle/public mismatch: bundles built for {bundles.public_id}, got {public.id}"
        )
    if len(bundles) != len(public):
        raise ValueError("bundle count does not match public dataset size")
    rng = np.random.default_rng(cfg.seed * 100003 + epoch)
    order = rng.permutation(len(public))
    images = torch.as_tensor(public.images)
    own_cam = False
    if cam is None and cfg.task == "classification" and (cfg.use_lower or cfg.use_upper):
        cam = GradCAM(state.model)
        own_cam = True
    try:
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            idx = np.sort(order[start : start + cfg.batch_size])
            x = images[idx]
            preds, maps = _student_outputs(state.model, x, cfg, cam)
            if cfg.task == "reconstruction":
                total, breakdown = reconstruction_loss(
                    preds, maps, bundles.z_hat[idx], bundles.lower[idx], bundles.upper[idx], cfg
                )
            else:
                total, breakdown = classification_loss(
                    preds, maps, bundles.z_hat[idx], bundles.lower[idx], bundles.upper[idx], cfg
                )
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            breakdown["step"] = state.step
            state.record(breakdown)
    finally:
        if own_cam:
            cam.close()
    return state


def train_student(model: torch.nn.Module, public: PublicDataset, bundles: BundleSet,
                  cfg: DistillConfig) -> StudentState:
    """Run the configured number of distillation epochs; deterministic per seed."""
    seed_everything(cfg.seed)
    state = StudentState(model=model)
    batches_per_epoch = int(np.ceil(len(public) / cfg.batch_size))
    total_steps = batches_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    optimizer, scheduler = build_optimizer(model, cfg, total_steps)
    cam = None
    if cfg.task == "classification" and (cfg.use_lower or cfg.use_upper):
        cam = GradCAM(model)
    try:
        model.train()
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            distill_epoch(state, public, bundles, cfg, optimizer, scheduler, epoch, cam)
    finally:
        if cam is not None:
            cam.close()
    model.eval()
    return state
