"""Small reference architectures with named layers for attention hooks.

Registered keys (append "+nonlocal" to encoder-decoders to route the
bottleneck through a residual non-local block):

  cnn-tiny / cnn-small / cnn-wide   image classifiers; gradcam layer "block2"
  segnet-tiny                       per-pixel classifier (C x H x W logits)
  unet-tiny                         residual encoder-decoder for reconstruction

Teachers and the student may use different keys; distillation only touches
inference products, never parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import nonlocal_attention


class NonLocalBlock(nn.Module):
    """Residual spatial self-attention enhancement of a feature map.

    Keeps the attention matrix of the latest forward in ``last_attention``
    (one forward at a time per instance).
    """

    def __init__(self):
        super().__init__()
        self.last_attention = None

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        att = nonlocal_attention(features)  # (N, HW, HW)
        self.last_attention = att
        n, j, h, w = features.shape
        flat = features.reshape(n, j, h * w)
        mixed = torch.einsum("npq,nqj->npj", att, flat.transpose(1, 2))
        return features + mixed.transpose(1, 2).reshape(n, j, h, w)


class ConvClassifier(nn.Module):
    """Two conv blocks, then a fully connected head. Grad-CAM hooks "block2"."""

    gradcam_layer = "block2"

    def __init__(self, num_classes: int, image_size: int = 28, in_channels: int = 1,
                 width: int = 32, hidden: int = 128):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)
        )
        feat = image_size // 4
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(width * 2 * feat * feat, hidden), nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x):
        return self.head(self.block2(self.block1(x)))


class PixelClassifier(nn.Module):
    """Per-pixel classification head producing (N, C, H, W) logits."""

    gradcam_layer = None

    def __init__(self, num_classes: int, in_channels: int = 1, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
        )
        self.head = nn.Conv2d(width, num_classes, 1)

    def forward(self, x):
        return self.head(self.body(x))


class TinyUNet(nn.Module):
    """Residual encoder-decoder; spatial attention comes from the bottleneck.

    ``last_bottleneck`` holds the (possibly non-local-enhanced) bottleneck
    features of the latest forward; :meth:`spatial_attention` turns them into
    the HW x HW attention matrix.
    """

    gradcam_layer = None

    def __init__(self, in_channels: int = 1, width: int = 16, use_nonlocal: bool = False):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
        )
        self.enc2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU())
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU())
        self.nonlocal_block = NonLocalBlock() if use_nonlocal else None
        self.up2 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec2 = nn.Sequential(nn.Conv2d(w + 2 * w, w, 3, padding=1), nn.ReLU())
        self.up1 = nn.ConvTranspose2d(w, w, 2, stride=2)
        self.dec1 = nn.Sequential(nn.Conv2d(w + w, w, 3, padding=1), nn.ReLU())
        self.out = nn.Conv2d(w, in_channels, 1)
        self.last_bottleneck = None

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        if self.nonlocal_block is not None:
            b = self.nonlocal_block(b)
        self.last_bottleneck = b
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return x + self.out(d1)

    def spatial_attention(self) -> torch.Tensor:
        """Attention of the latest forward's bottleneck features, (N, HW, HW)."""
        if self.last_bottleneck is None:
            raise RuntimeError("run a forward pass before requesting attention")
        if self.nonlocal_block is not None and self.nonlocal_block.last_attention is not None:
            return self.nonlocal_block.last_attention
        return nonlocal_attention(self.last_bottleneck)


def build_student(architecture: str, num_classes: int = 10, image_size: int = 28,
                  in_channels: int = 1) -> nn.Module:
    """Instantiate a registered architecture by key; raises on unknown keys."""
    base, *mods = architecture.split("+")
    use_nonlocal = "nonlocal" in mods
    unknown = [m for m in mods if m != "nonlocal"]
    if unknown:
        raise ValueError(f"unknown architecture modifiers {unknown} in {architecture!r}")
    if base in ("cnn-tiny", "cnn-small", "cnn-wide"):
        if use_nonlocal:
            raise ValueError("non-local modifier applies to encoder-decoder architectures")
        width, hidden = {"cnn-tiny": (8, 32), "cnn-small": (32, 128), "cnn-wide": (48, 192)}[base]
        model = ConvClassifier(num_classes, image_size, in_channels, width=width, hidden=hidden)
    elif base == "segnet-tiny":
        model = PixelClassifier(num_classes, in_channels)
    elif base == "unet-tiny":
        model = TinyUNet(in_channels, use_nonlocal=use_nonlocal)
    else:
        raise ValueError(
            f"unknown architecture {architecture!r}; registered: {registered_architectures()}"
        )
    model.architecture = architecture
    return model


def registered_architectures() -> list[str]:
    return ["cnn-tiny", "cnn-small", "cnn-wide", "segnet-tiny", "unet-tiny", "unet-tiny+nonlocal"]


def parameter_bytes(model: nn.Module) -> int:
    """Exact byte size of all parameters, the unit of FedAvg transfers."""
    return sum(p.numel() * p.element_size() for p in model.parameters())
