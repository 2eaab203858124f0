"""Attention maps and the ensemble attention-bound losses.

Two attention flavors feed the bound constraints: top-down gradient-based
class activation maps for classifiers, and non-local spatial self-attention
for encoder-decoder reconstruction nets. Teacher maps are combined
elementwise into a consensus (minimum) and a diversity (maximum) map; the
student is pushed to activate inside the consensus and stay under the
diversity envelope via two sigmoid-soft-masked ratio losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as torchf

from .utils import write_json_atomic


@dataclass
class SoftMaskParams:
    """Sigmoid soft-threshold: sharpness ``rho`` and threshold ``b``.

    The defaults give a soft 0.5-threshold; neither value is prescribed by
    the method itself, both are configurable.
    """

    rho: float = 8.0
    b: float = 0.5

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


@dataclass
class AttentionMap:
    """Normalized 2-D spatial map; ``kind`` records how it was produced."""

    values: np.ndarray
    kind: str = "gradcam"  # gradcam | segmentation-prob | nonlocal-row
    class_id: int | None = None
    normalized: bool = False
    zero_map: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if not np.isfinite(self.values).all():
            raise ValueError("attention map contains non-finite values")

    def save(self, path) -> None:
        path = str(path)
        np.save(path if path.endswith(".npy") else path + ".npy", self.values)
        sidecar = (path[: -len(".npy")] if path.endswith(".npy") else path) + ".json"
        write_json_atomic(
            sidecar,
            {
                "kind": self.kind,
                "class_id": self.class_id,
                "shape": list(self.values.shape),
                "normalized": self.normalized,
                "flags": {"zero_map": self.zero_map},
            },
        )


@dataclass
class BoundPair:
    """Elementwise lower (consensus) and upper (diversity) attention bounds."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float32)
        self.upper = np.asarray(self.upper, dtype=np.float32)
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound shapes differ")
        if (self.lower > self.upper + 1e-6).any():
            raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class BoundLossResult:
    """Bound-loss value plus the fraction of maps hit by a degenerate denominator."""

    value: torch.Tensor
    degenerate_fraction: float

    @property
    def degenerate(self) -> bool:
        return self.degenerate_fraction > 0


def _to_tensor(a) -> torch.Tensor:
    if isinstance(a, AttentionMap):
        a = a.values
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a), dtype=torch.float32)


def normalize_attention(values, kind: str = "gradcam", class_id: int | None = None) -> AttentionMap:
    """Divide by the map maximum so values lie in [0, 1] with max 1.

    An identically-zero map is returned unchanged and flagged so callers can
    skip degenerate teachers.
    """
    arr = np.asarray(values.values if isinstance(values, AttentionMap) else values, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("cannot normalize: non-finite attention values")
    if (arr < 0).any():
        raise ValueError("cannot normalize: negative attention values")
    peak = float(arr.max()) if arr.size else 0.0
    if peak == 0.0:
        return AttentionMap(arr, kind=kind, class_id=class_id, normalized=True, zero_map=True)
    return AttentionMap(arr / peak, kind=kind, class_id=class_id, normalized=True)


def normalize_maps(stack: torch.Tensor) -> torch.Tensor:
    """Per-map max normalization over the last two dims; zero maps pass through.

    Differentiable through the map values; the peak itself is treated as a
    constant, otherwise a training loss on the normalized map could saturate
    the soft mask by shrinking the peak instead of raising the response.
    """
    peak = stack.amax(dim=(-2, -1), keepdim=True).detach()
    return torch.where(peak > 0, stack / peak.clamp_min(1e-30), stack)


# ---------------------------------------------------------------------------
# gradient-based class activation maps


class GradCAM:
    """Extracts class activation maps from a named convolutional layer.

    A forward hook captures the layer's feature maps; channel weights are the
    spatial mean of the class score's gradient w.r.t. those features, and the
    map is the ReLU of the weighted channel sum. With ``create_graph=True``
    the maps stay differentiable w.r.t. model parameters, which the student
    needs so the bound losses can reach its weights.

    One extraction at a time per instance (the hook stores state).
    """

    def __init__(self, model: torch.nn.Module, layer: str | torch.nn.Module | None = None):
        self.model = model
        if layer is None:
            layer = getattr(model, "gradcam_layer", None)
            if layer is None:
                raise ValueError("model declares no default gradcam layer; pass one explicitly")
        if isinstance(layer, str):
            modules = dict(model.named_modules())
            if layer not in modules:
                raise ValueError(f"layer {layer!r} not found in model (have {sorted(modules)[:8]}...)")
            layer = modules[layer]
        self._features: torch.Tensor | None = None
        self._handle = layer.register_forward_hook(self._capture)

    def _capture(self, module, inputs, output):
        self._features = output

    def close(self):
        self._handle.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        self._features = None
        if not x.requires_grad and not any(p.requires_grad for p in self.model.parameters()):
            # parameter-free models still expose feature gradients via the input
            x = x.detach().clone().requires_grad_(True)
        logits = self.model(x)
        feats = self._features
        if feats is None:
            raise ValueError("hooked layer was not executed by the forward pass")
        if feats.dim() != 4:
            raise ValueError(f"gradcam needs a spatial feature map, got shape {tuple(feats.shape)}")
        if not feats.requires_grad:
            raise ValueError("feature map carries no gradient (model in inference-only mode?)")
        return logits

    def class_map(self, x: torch.Tensor, class_id: int, create_graph: bool = False,
                  normalize: bool = True) -> torch.Tensor:
        """Maps for one class over a batch; returns (N, h, w)."""
        with torch.enable_grad():
            logits = self._forward(x)
            return self._map_from(logits, class_id, create_graph, normalize)

    def all_class_maps(self, x: torch.Tensor, create_graph: bool = False,
                       normalize: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """(logits (N, C), maps (N, C, h, w)) for every class."""
        with torch.enable_grad():
            logits = self._forward(x)
            maps = [
                self._map_from(logits, c, create_graph, normalize, retain=True)
                for c in range(logits.shape[1])
            ]
        return logits, torch.stack(maps, dim=1)

    def _map_from(self, logits, class_id, create_graph, normalize, retain=False):
        if not 0 <= class_id < logits.shape[1]:
            raise ValueError(f"class_id {class_id} out of range for {logits.shape[1]} classes")
        feats = self._features
        grads = torch.autograd.grad(
            logits[:, class_id].sum(),
            feats,
            create_graph=create_graph,
            retain_graph=retain or create_graph,
        )[0]
        weights = grads.mean(dim=(2, 3))  # spatial mean = channel importance
        cam = torch.relu((weights[:, :, None, None] * feats).sum(dim=1))
        if not create_graph:
            cam = cam.detach()
        return normalize_maps(cam) if normalize else cam


def gradcam(model, x, class_id: int, layer=None, normalize: bool = False) -> AttentionMap:
    """One-shot single-input convenience wrapper around :class:`GradCAM`."""
    x = _to_tensor(x)
    if x.dim() == 3:
        x = x[None]
    with GradCAM(model, layer) as cam:
        values = cam.class_map(x, class_id, normalize=normalize)[0].cpu().numpy()
    if normalize:
        return normalize_attention(values, kind="gradcam", class_id=class_id)
    return AttentionMap(values, kind="gradcam", class_id=class_id, normalized=False)


def segmentation_attention(logits, tau: float, class_id: int | None = None):
    """Per-pixel softened class probabilities used directly as attention.

    ``logits`` is (C, H, W) or (N, C, H, W); returns the same shape, or the
    class-``class_id`` plane when requested.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = _to_tensor(logits)
    if z.dim() not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) logits, got {tuple(z.shape)}")
    probs = torch.softmax(z / tau, dim=-3)
    if class_id is not None:
        probs = probs.select(-3, class_id)
    return probs


# ---------------------------------------------------------------------------
# non-local self-attention


def _flatten_spatial(features: torch.Tensor) -> torch.Tensor:
    if features.dim() == 3:
        features = features[None]
    if features.dim() != 4:
        raise ValueError(f"expected (J, H, W) or (N, J, H, W) features, got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise ValueError("non-finite features")
    n, j, h, w = features.shape
    return features.reshape(n, j, h * w)


def nonlocal_attention(features) -> torch.Tensor:
    """Spatial-similarity attention: dot-product similarity of flattened
    features, softmax-normalized along the first spatial axis so that every
    column sums to 1. Returns (HW, HW), or (N, HW, HW) for batched input."""
    features = _to_tensor(features)
    squeeze = features.dim() == 3
    flat = _flatten_spatial(features)
    sim = torch.einsum("njp,njq->npq", flat, flat)
    att = torch.softmax(sim, dim=-2)
    return att[0] if squeeze else att


def nonlocal_enhance(features) -> torch.Tensor:
    """Residual feature enhancement by the non-local attention; shape preserved."""
    features = _to_tensor(features)
    squeeze = features.dim() == 3
    flat = _flatten_spatial(features)  # (N, J, HW)
    att = torch.softmax(torch.einsum("njp,njq->npq", flat, flat), dim=-2)  # (N, HW, HW)
    mixed = torch.einsum("npq,nqj->npj", att, flat.transpose(1, 2))  # A @ F̄ᵀ
    out = flat + mixed.transpose(1, 2)
    out = out.reshape(features.shape if not squeeze else (1, *features.shape))
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# bounds and bound losses


def attention_bounds(maps) -> BoundPair:
    """Elementwise minimum (consensus) and maximum (diversity) over teacher maps."""
    arrays = [np.asarray(m.values if isinstance(m, AttentionMap) else m, dtype=np.float32) for m in maps]
    if not arrays:
        raise ValueError("need at least one attention map")
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ValueError(f"map {i} has shape {a.shape}, expected {shape}")
        if not np.isfinite(a).all():
            raise ValueError(f"map {i} has non-finite values")
        if a.min() < -1e-6 or a.max() > 1 + 1e-6:
            raise ValueError(f"map {i} is not normalized to [0, 1]")
    stack = np.stack(arrays)
    return BoundPair(lower=stack.min(axis=0), upper=stack.max(axis=0))


def soft_mask(values, params: SoftMaskParams | None = None) -> torch.Tensor:
    """Sigmoid soft threshold 1 / (1 + exp(-rho * (A - b))); values in (0, 1)."""
    params = params or SoftMaskParams()
    a = _to_tensor(values)
    if not torch.isfinite(a).all():
        raise ValueError("non-finite input to soft mask")
    return torch.sigmoid(params.rho * (a - params.b))


def _bound_ratio_loss(weight, mask, params, normalized):
    """Shared core: -(1/|map|) * sum(weight * T(mask)) / sum(weight), per map."""
    w = _to_tensor(weight)
    m = soft_mask(mask, params)
    if w.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(w.shape)} vs {tuple(m.shape)}")
    if w.dim() < 2:
        raise ValueError("bound losses need at least a 2-D map")
    numer = (w * m).sum(dim=(-2, -1))
    denom = w.sum(dim=(-2, -1))
    size = 1.0 if normalized else float(w.shape[-2] * w.shape[-1])
    ok = denom > 0
    safe_denom = torch.where(ok, denom, torch.ones_like(denom))
    per_map = torch.where(ok, -(numer / safe_denom) / size, torch.zeros_like(denom))
    degenerate = 1.0 - ok.float().mean().item()
    return BoundLossResult(per_map.mean(), degenerate)


def lower_bound_loss(student_attention, consensus, params: SoftMaskParams | None = None,
                     normalized: bool = False) -> BoundLossResult:
    """Push the student to activate where all teachers agree.

    The consensus map weights the soft-masked student attention; the ratio is
    averaged over any leading batch/class dims. An all-zero consensus gives a
    zero loss flagged in ``degenerate_fraction``. ``normalized=True`` drops
    the 1/(H*W) prefactor so magnitudes are resolution-independent; the
    verbatim form is the default. Differentiable w.r.t. the student map.
    """
    params = params or SoftMaskParams()
    return _bound_ratio_loss(consensus, student_attention, params, normalized)


def upper_bound_loss(student_attention, diversity, params: SoftMaskParams | None = None,
                     normalized: bool = False) -> BoundLossResult:
    """Keep student attention mass inside regions supported by some teacher.

    The raw (pre-mask) student map weights the soft-masked diversity map; the
    deliberate asymmetry with :func:`lower_bound_loss` follows the formulas
    as written. A zero student map gives a flagged zero loss.
    """
    params = params or SoftMaskParams()
    return _bound_ratio_loss(student_attention, diversity, params, normalized)
