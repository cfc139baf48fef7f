import numpy as np
import pytest

from autodiff import ShapeError, Tensor, ops
from autodiff.gradcheck import check_gradients
from networks.affinity import (AffinityConfig, AffinityExtractor, CrossAttentionBlock, NodeHead, RadiomicsScaler,
                               RadiomicsVector, TokenEmbed, embed, extract, predict_node)
from networks.backbones import FeaturePyramid


def pyramid_for(rng, config, batch=None, tokens=17):
    shape = (tokens, config.global_dim) if batch is None else (batch, tokens, config.global_dim)
    return FeaturePyramid({s: Tensor(rng.normal(size=shape)) for s in config.scales})


def silence_attention(extractor):
    """Zero every cross-attention block so the token stream passes through unchanged"""
    for block in extractor.blocks.values():
        for _, tensor in block.named_tensors():
            tensor.values = np.zeros_like(tensor.values)


def test_default_embed_shape(rng):
    extractor = AffinityExtractor(AffinityConfig(), rng)
    tokens = embed(extractor, rng.normal(size=(64, 8, 8)))
    assert tokens.shape == (65, 64)


def test_zero_features_embed_to_positions(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    tokens = embed(extractor, np.zeros((16, 8, 8))).values
    pos = extractor.embed.pos_embed.values
    cls = extractor.embed.cls_token.values
    np.testing.assert_array_equal(tokens[1:], pos[1:])
    np.testing.assert_array_equal(tokens[0], cls[0] + pos[0])


def test_indivisible_patch_size_is_rejected(rng):
    with pytest.raises(ShapeError):
        TokenEmbed(AffinityConfig(patch_size=3), rng)


def test_attention_dim_must_split_over_heads():
    with pytest.raises(ValueError):
        AffinityConfig(dim=30, heads=4)


def test_single_global_token_gives_projected_values(rng, mini_affinity):
    block = CrossAttentionBlock(mini_affinity, rng)
    tokens = Tensor(rng.normal(size=(1, 65, 16)))
    context = Tensor(rng.normal(size=(1, 1, 16)))
    attended = block.attn.attend(block.norm_q(tokens), block.norm_kv(context)).values
    np.testing.assert_array_equal(block.attn.last_weights, 1.0)
    values = block.attn.v_proj(block.norm_kv(context)).values
    np.testing.assert_allclose(attended, np.broadcast_to(values, attended.shape), atol=1e-12)


def test_duplicated_global_tokens_match_single_token(rng, mini_affinity):
    block = CrossAttentionBlock(mini_affinity, rng)
    tokens = Tensor(rng.normal(size=(1, 65, 16)))
    single = rng.normal(size=(1, 1, 16))
    one = block.attn(block.norm_q(tokens), block.norm_kv(Tensor(single))).values
    two = block.attn(block.norm_q(tokens), block.norm_kv(Tensor(np.concatenate([single, single], axis=1)))).values
    assert np.max(np.abs(one - two)) < 1e-12


def test_cross_attention_preserves_shape_and_rows_sum_to_one(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    tokens = Tensor(rng.normal(size=(3, 65, 16)))
    out = extractor.cross_attend(tokens, Tensor(rng.normal(size=(3, 17, 16))), 2)
    assert out.shape == tokens.shape
    weights = extractor.blocks["2"].attn.last_weights
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_unknown_scale_is_rejected(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    with pytest.raises(ValueError):
        extractor.cross_attend(Tensor(np.zeros((1, 65, 16))), Tensor(np.zeros((1, 17, 16))), 7)


def test_class_token_can_be_excluded_from_keys(rng):
    config = AffinityConfig(local_channels=16, global_dim=16, token_dim=16, dim=16, heads=2, scales=(1,),
                            include_global_cls=False)
    extractor = AffinityExtractor(config, rng)
    extractor.cross_attend(Tensor(rng.normal(size=(1, 65, 16))), Tensor(rng.normal(size=(1, 17, 16))), 1)
    assert extractor.blocks["1"].attn.last_weights.shape == (1, 2, 65, 16)


def test_silent_attention_with_inverse_unembed_returns_input(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    silence_attention(extractor)
    extractor.embed.pos_embed.values = np.zeros_like(extractor.embed.pos_embed.values)
    weight = extractor.embed.proj.weight.values
    extractor.unembed.proj.weight.values = np.linalg.inv(weight).reshape(16, 16, 1, 1)
    features = rng.normal(size=(16, 8, 8))
    out = extract(extractor, features, pyramid_for(rng, mini_affinity))
    assert out.shape == (16, 8, 8)
    assert np.max(np.abs(out.values - features)) < 1e-10


def test_global_context_changes_output(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    features = rng.normal(size=(16, 8, 8))
    first = extract(extractor, features, pyramid_for(rng, mini_affinity)).values
    second = extract(extractor, features, pyramid_for(rng, mini_affinity)).values
    assert np.mean(np.abs(first - second)) > 0


def test_nodes_attend_to_their_own_patient(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    features = rng.normal(size=(3, 16, 8, 8))
    pyramid = pyramid_for(rng, mini_affinity, batch=2)
    batched = extractor(Tensor(features), pyramid, np.array([1, 0, 1])).values
    for j, owner in enumerate([1, 0, 1]):
        own = FeaturePyramid({s: Tensor(pyramid[s].values[owner]) for s in mini_affinity.scales})
        alone = extract(extractor, features[j], own).values
        np.testing.assert_allclose(batched[j], alone, atol=1e-12)


def test_chaining_order_matters(rng, mini_affinity):
    extractor = AffinityExtractor(mini_affinity, rng)
    features = rng.normal(size=(16, 8, 8))
    pyramid = pyramid_for(rng, mini_affinity)
    forward = extract(extractor, features, pyramid).values
    extractor.config.scales = tuple(reversed(mini_affinity.scales))
    backward_order = extract(extractor, features, pyramid).values
    assert np.max(np.abs(forward - backward_order)) > 1e-8


def test_extract_gradient_matches_finite_differences(rng):
    config = AffinityConfig(local_channels=4, global_dim=8, token_dim=8, dim=8, heads=2, patch_size=2,
                            feature_size=4, scales=(1, 2), mlp_ratio=2)
    extractor = AffinityExtractor(config, rng)
    for _, tensor in extractor.named_tensors():
        tensor.values = tensor.values + rng.normal(0.0, 0.3, size=tensor.shape)
    features = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    tokens = {s: Tensor(rng.normal(size=(5, 8)), requires_grad=True) for s in config.scales}
    weights = Tensor(rng.normal(size=(4, 4, 4)))

    def readout():
        return ops.sum_(ops.mul(extractor(features, FeaturePyramid(tokens)), weights))

    assert check_gradients(readout, [features, tokens[1], tokens[2]], h=1e-6) < 1e-4


def test_zero_head_predicts_one_half(rng):
    head = NodeHead(64, 32, rng)
    for _, tensor in head.named_tensors():
        tensor.values = np.zeros_like(tensor.values)
    prediction = predict_node(head, rng.normal(size=(64, 8, 8)), RadiomicsVector(1.0, -0.5, 0.2, 0.0))
    assert prediction.p.values[0] == 0.5
    assert prediction.class_map.shape == (1, 2, 8, 8)
    assert head.fc1.weight.shape[0] == 68


def test_larger_size_raises_logit_with_positive_weight(rng):
    head = NodeHead(4, 3, rng)
    head.fc1.weight.values = np.zeros((8, 3))
    head.fc1.weight.values[4, 0] = 1.0
    head.fc2.weight.values = np.array([[2.0], [0.0], [0.0]])
    features = rng.normal(size=(4, 8, 8))
    small = predict_node(head, features, RadiomicsVector(0.5, 0.0, 0.0, 0.0)).logit.item()
    large = predict_node(head, features, RadiomicsVector(1.0, 0.0, 0.0, 0.0)).logit.item()
    assert large > small


def test_head_is_invariant_to_cell_permutation(rng):
    head = NodeHead(6, 5, rng)
    features = rng.normal(size=(6, 8, 8))
    perm = rng.permutation(64)
    shuffled = features.reshape(6, 64)[:, perm].reshape(6, 8, 8)
    radiomics = RadiomicsVector(0.1, 0.2, 0.3, 0.4)
    base = predict_node(head, features, radiomics)
    moved = predict_node(head, shuffled, radiomics)
    np.testing.assert_allclose(moved.p.values, base.p.values, atol=1e-14)
    np.testing.assert_allclose(moved.class_map.values.reshape(2, 64), base.class_map.values.reshape(2, 64)[:, perm],
                               atol=1e-12)


def test_non_finite_radiomics_rejected(rng):
    head = NodeHead(4, 3, rng)
    with pytest.raises(ValueError):
        predict_node(head, rng.normal(size=(4, 8, 8)), RadiomicsVector(np.nan, 0.0, 0.0, 0.0))


def test_radiomics_scaler_standardizes_and_survives_constant_columns():
    raw = np.array([[1.0, 2.0, 5.0, 0.3], [3.0, 4.0, 5.0, 0.5], [5.0, 6.0, 5.0, 0.7]])
    scaler = RadiomicsScaler().fit(raw)
    out = scaler.transform(raw)
    np.testing.assert_allclose(out[:, [0, 1, 3]].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, [0, 1, 3]].std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(out[:, 2], 0.0)
    assert RadiomicsVector.from_array(raw[0]).f_RD == 5.0
