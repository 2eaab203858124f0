import numpy as np
import pytest
import torch

from fedad.attention import GradCAM, nonlocal_attention
from fedad.models import (
    NonLocalBlock,
    build_student,
    parameter_bytes,
    registered_architectures,
)


def test_registry_round_trip():
    for arch in registered_architectures():
        model = build_student(arch, num_classes=3, image_size=16)
        assert model.architecture == arch


def test_unknown_architecture_rejected():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_student("transformer-xl")
    with pytest.raises(ValueError, match="modifier"):
        build_student("unet-tiny+sparkles")
    with pytest.raises(ValueError, match="encoder-decoder"):
        build_student("cnn-small+nonlocal")


def test_classifier_has_documented_gradcam_layer():
    model = build_student("cnn-small", num_classes=5, image_size=28)
    assert model.gradcam_layer == "block2"
    assert "block2" in dict(model.named_modules())
    cam = GradCAM(model)
    logits, maps = cam.all_class_maps(torch.rand(2, 1, 28, 28))
    cam.close()
    assert logits.shape == (2, 5)
    assert maps.shape == (2, 5, 7, 7)


def test_heterogeneous_classifiers_share_output_space():
    small = build_student("cnn-small", num_classes=4, image_size=16)
    wide = build_student("cnn-wide", num_classes=4, image_size=16)
    x = torch.rand(3, 1, 16, 16)
    assert small(x).shape == wide(x).shape == (3, 4)
    assert parameter_bytes(wide) > parameter_bytes(small)


def test_pixel_classifier_shapes():
    model = build_student("segnet-tiny", num_classes=2, image_size=24)
    out = model(torch.rand(2, 1, 24, 24))
    assert out.shape == (2, 2, 24, 24)


def test_unet_shape_and_attention():
    model = build_student("unet-tiny", image_size=32)
    x = torch.rand(2, 1, 32, 32)
    out = model(x)
    assert out.shape == x.shape
    att = model.spatial_attention()
    assert att.shape == (2, 64, 64)
    assert torch.allclose(att.sum(dim=1), torch.ones(2, 64), atol=1e-5)


def test_unet_nonlocal_routes_through_block():
    model = build_student("unet-tiny+nonlocal", image_size=32)
    assert isinstance(model.nonlocal_block, NonLocalBlock)
    x = torch.rand(1, 1, 32, 32)
    model(x)
    assert model.nonlocal_block.last_attention is not None
    assert model.spatial_attention() is model.nonlocal_block.last_attention


def test_nonlocal_block_matches_functional_path():
    block = NonLocalBlock()
    feats = torch.rand(2, 3, 4, 4)
    out = block(feats)
    att = nonlocal_attention(feats)
    flat = feats.reshape(2, 3, 16)
    mixed = torch.einsum("npq,nqj->npj", att, flat.transpose(1, 2))
    expected = feats + mixed.transpose(1, 2).reshape(2, 3, 4, 4)
    assert torch.allclose(out, expected, atol=1e-6)


def test_attention_requires_forward_first():
    model = build_student("unet-tiny", image_size=16)
    with pytest.raises(RuntimeError, match="forward"):
        model.spatial_attention()


def test_parameter_bytes_exact():
    model = build_student("cnn-tiny", num_classes=2, image_size=16)
    expected = sum(p.numel() for p in model.parameters()) * 4
    assert parameter_bytes(model) == expected


def test_seeded_build_is_deterministic():
    torch.manual_seed(7)
    a = build_student("cnn-tiny", num_classes=3, image_size=16)
    torch.manual_seed(7)
    b = build_student("cnn-tiny", num_classes=3, image_size=16)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
