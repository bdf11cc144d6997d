import numpy as np
import pytest
import torch

from capret.backbones import DecoderConfig, VisionEncoderConfig, init_backbones
from capret.bridge import (
    init_bridge,
    project_image_for_retrieval,
    project_ret_for_retrieval,
    project_visual_prefix,
    trainable_count,
    trainable_parameters,
)

from oracles import matvec_oracle


def test_shapes_and_temperature(toy_model):
    _, bridge, _ = toy_model
    assert tuple(bridge.prefix_proj.shape) == (8, 16)
    assert tuple(bridge.image_proj.shape) == (8, 4)
    assert tuple(bridge.text_proj.shape) == (16, 4)
    assert tuple(bridge.ret_embedding.shape) == (16,)
    assert bridge.log_temperature.ndim == 0
    assert float(bridge.temperature.detach()) == pytest.approx(0.07, abs=1e-6)


def test_trainable_count_formula(toy_model):
    _, bridge, _ = toy_model
    # m*D + m*q + H*q + D + 1
    assert trainable_count(bridge) == 8 * 16 + 8 * 4 + 16 * 4 + 16 + 1 == 241


def test_trainable_count_at_desk_dims():
    backbones = init_backbones(
        VisionEncoderConfig(), DecoderConfig(vocab_size=50), seed=0
    )
    bridge = init_bridge(backbones, retrieval_dim=32, seed=0)
    assert trainable_count(bridge) == 64 * 128 + 64 * 32 + 128 * 32 + 128 + 1 == 14465


def test_retrieval_dim_must_be_smaller_than_decoder_width(toy_model):
    backbones, _, _ = toy_model
    with pytest.raises(ValueError):
        init_bridge(backbones, retrieval_dim=16, seed=0)
    with pytest.raises(ValueError):
        init_bridge(backbones, retrieval_dim=0, seed=0)


def test_named_tensors_keys(toy_model):
    _, bridge, _ = toy_model
    assert set(bridge.named_tensors()) == {
        "prefix_proj", "image_proj", "text_proj", "ret_embedding", "log_temperature"
    }


def test_projections_match_naive_oracle(toy_model):
    _, bridge, _ = toy_model
    rng = np.random.default_rng(4)
    v = rng.standard_normal(8).astype(np.float32)
    h = rng.standard_normal(16).astype(np.float32)
    for project, weight, x in (
        (project_visual_prefix, bridge.prefix_proj, v),
        (project_image_for_retrieval, bridge.image_proj, v),
        (project_ret_for_retrieval, bridge.text_proj, h),
    ):
        got = project(bridge, x).detach().numpy()
        want = matvec_oracle(weight.detach().numpy().tolist(), x.tolist())
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_projection_linearity(toy_model):
    _, bridge, _ = toy_model
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = rng.standard_normal(2)
        v1, v2 = rng.standard_normal((2, 8)).astype(np.float32)
        lhs = project_visual_prefix(bridge, a * v1 + b * v2)
        rhs = a * project_visual_prefix(bridge, v1) + b * project_visual_prefix(bridge, v2)
        np.testing.assert_allclose(lhs.detach().numpy(), rhs.detach().numpy(), atol=1e-5)


def test_temperature_positive_for_any_log_value(toy_model):
    _, bridge, _ = toy_model
    original = bridge.log_temperature.detach().clone()
    try:
        for value in (-30.0, -1.0, 0.0, 3.0):
            with torch.no_grad():
                bridge.log_temperature.copy_(torch.tensor(value))
            assert float(bridge.temperature.detach()) > 0
    finally:
        with torch.no_grad():
            bridge.log_temperature.copy_(original)


def test_init_deterministic_and_seed_sensitive():
    backbones = init_backbones(
        VisionEncoderConfig(patch_size=112, embed_dim=8, n_layers=1, n_heads=2),
        DecoderConfig(vocab_size=20, embed_dim=16, hidden_dim=16, n_layers=1, n_heads=2, context_len=24),
        seed=0,
    )
    d1 = init_bridge(backbones, retrieval_dim=4, seed=1).tensor_digests()
    d2 = init_bridge(backbones, retrieval_dim=4, seed=1).tensor_digests()
    d3 = init_bridge(backbones, retrieval_dim=4, seed=2).tensor_digests()
    assert d1 == d2
    assert d1 != d3


def test_ret_embedding_initialized_near_mean_row(toy_model):
    backbones, bridge, _ = toy_model
    mean_row = backbones.decoder.token_embed.weight.detach().mean(dim=0)
    # init is mean embedding row plus uniform(-0.01, 0.01) noise
    assert (bridge.ret_embedding.detach() - mean_row).abs().max().item() <= 0.01 + 1e-7


def test_trainable_parameters_returns_live_tensors(toy_model):
    backbones, bridge, _ = toy_model
    params = trainable_parameters(bridge, backbones.decoder_cfg)
    assert set(params) == set(bridge.named_tensors())
    for name, tensor in bridge.named_tensors().items():
        assert params[name] is tensor
    mismatched = DecoderConfig(vocab_size=20, embed_dim=32, hidden_dim=32)
    with pytest.raises(ValueError):
        trainable_parameters(bridge, mismatched)


def test_grad_toggle(toy_model):
    _, bridge, _ = toy_model
    bridge.requires_grad_(True)
    assert all(p.requires_grad for p in bridge.named_tensors().values())
    bridge.requires_grad_(False)
    assert not any(p.requires_grad for p in bridge.named_tensors().values())
