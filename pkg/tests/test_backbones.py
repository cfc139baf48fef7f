import logging

import numpy as np
import pytest

from autodiff import ShapeError, Tensor, ops
from autodiff.gradcheck import check_gradients
from checkpoint import Checkpoint, CheckpointError, encode_checkpoint, save_checkpoint
from networks.backbones import (GlobalEncoder, GlobalEncoderConfig, LocalEncoder, LocalEncoderConfig, global_encode,
                                import_weights, local_encode)


def zero_all(module, keep=()):
    for name, tensor in module.named_tensors():
        if name not in keep:
            tensor.values = np.zeros_like(tensor.values)


def test_default_pyramid_shapes(rng):
    encoder = GlobalEncoder(GlobalEncoderConfig(), rng)
    pyramid = global_encode(encoder, rng.uniform(size=(1, 128, 128)))
    assert pyramid.taps == [1, 5, 9]
    for tap in (1, 5, 9):
        assert pyramid[tap].shape == (65, 96)
        assert np.all(np.isfinite(pyramid[tap].values))


def test_config_invariants():
    with pytest.raises(ValueError):
        GlobalEncoderConfig(patch_size=24)
    with pytest.raises(ValueError):
        GlobalEncoderConfig(depth=4, taps=(1, 5))
    with pytest.raises(ValueError):
        LocalEncoderConfig(input_size=30)


def test_zero_weights_preserve_positional_embeddings(rng, mini_global):
    encoder = GlobalEncoder(mini_global, rng)
    zero_all(encoder, keep=("pos_embed",))
    pyramid = encoder(Tensor(np.zeros((1, 128, 128))))
    for tap in mini_global.taps:
        np.testing.assert_array_equal(pyramid[tap].values, encoder.pos_embed.values)


def test_tap_one_is_permutation_equivariant_without_positions(rng, mini_global):
    encoder = GlobalEncoder(mini_global, rng)
    encoder.pos_embed.values = np.zeros_like(encoder.pos_embed.values)
    image = rng.uniform(size=(1, 128, 128))
    cells = [image[:, r:r + 32, c:c + 32] for r in range(0, 128, 32) for c in range(0, 128, 32)]
    perm = rng.permutation(16)
    shuffled = np.zeros_like(image)
    for slot, source in enumerate(perm):
        r, c = divmod(slot, 4)
        shuffled[:, r * 32:(r + 1) * 32, c * 32:(c + 1) * 32] = cells[source]

    original = encoder(Tensor(image))[1].values
    permuted = encoder(Tensor(shuffled))[1].values
    np.testing.assert_allclose(permuted[1:], original[1:][perm], atol=1e-12)
    np.testing.assert_allclose(permuted[0], original[0], atol=1e-12)


def test_self_attention_rows_are_distributions(rng, mini_global):
    encoder = GlobalEncoder(mini_global, rng)
    encoder(Tensor(rng.uniform(size=(2, 1, 128, 128))))
    for block in encoder.blocks:
        weights = block.attn.last_weights
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_global_encoder_gradient_matches_finite_differences(rng):
    config = GlobalEncoderConfig(image_size=32, patch_size=16, depth=4, dim=32, heads=4, mlp_ratio=2, taps=(1, 2, 3))
    encoder = GlobalEncoder(config, rng)
    for block in encoder.blocks:
        for name, tensor in block.named_tensors():
            tensor.values = tensor.values + rng.normal(0.0, 0.2, size=tensor.shape)
    image = Tensor(rng.uniform(size=(1, 32, 32)), requires_grad=True)
    weights = {tap: Tensor(rng.normal(size=(5, 32))) for tap in config.taps}

    def readout():
        pyramid = encoder(image)
        terms = [ops.sum_(ops.mul(pyramid[tap], weights[tap])) for tap in config.taps]
        return ops.add(ops.add(terms[0], terms[1]), terms[2])

    assert check_gradients(readout, [image, encoder.pos_embed, encoder.cls_token], h=1e-6) < 1e-4


def test_global_shape_mismatch(rng, mini_global):
    encoder = GlobalEncoder(mini_global, rng)
    with pytest.raises(ShapeError):
        encoder(Tensor(np.zeros((1, 64, 64))))


def test_local_output_shape_and_batching(rng):
    encoder = LocalEncoder(LocalEncoderConfig(), rng)
    single = local_encode(encoder, rng.uniform(size=(1, 32, 32)))
    assert single.shape == (64, 8, 8)
    batch = encoder(Tensor(rng.uniform(size=(3, 1, 32, 32))))
    assert batch.shape == (3, 64, 8, 8)


def test_local_zero_input_with_zero_biases_is_zero(rng, mini_local):
    encoder = LocalEncoder(mini_local, rng)
    for name, tensor in encoder.named_tensors():
        if name.endswith("bias"):
            tensor.values = np.zeros_like(tensor.values)
    out = encoder(Tensor(np.zeros((1, 32, 32))))
    np.testing.assert_array_equal(out.values, 0.0)


def test_projected_shortcut_passes_input_when_residual_branch_is_zero(rng, mini_local):
    encoder = LocalEncoder(mini_local, rng)
    block = encoder.down
    block.norm2.weight.values = np.zeros_like(block.norm2.weight.values)
    x = Tensor(np.abs(rng.normal(size=(1, 8, 16, 16))))
    expected = ops.relu(block.shortcut_norm(block.shortcut(x))).values
    np.testing.assert_allclose(block(x).values, expected, atol=1e-12)


def test_identity_shortcut_with_zero_residual_branch(rng, mini_local):
    encoder = LocalEncoder(mini_local, rng)
    block = encoder.stage1[0]
    block.norm2.weight.values = np.zeros_like(block.norm2.weight.values)
    x = Tensor(np.abs(rng.normal(size=(2, 8, 16, 16))))
    np.testing.assert_array_equal(block(x).values, x.values)


def test_local_encoder_is_translation_covariant(rng):
    config = LocalEncoderConfig(stem_channels=4, out_channels=8, blocks_per_stage=0, stage_stride=1)
    encoder = LocalEncoder(config, rng)
    for name, tensor in encoder.named_tensors():
        if name.endswith("bias"):
            tensor.values = np.zeros_like(tensor.values)
    patch = np.zeros((1, 32, 32))
    patch[0, 14:18, 14:18] = rng.uniform(0.2, 1.0, size=(4, 4))
    shifted = np.roll(patch, (2, 2), axis=(1, 2))

    base = encoder(Tensor(patch)).values
    moved = encoder(Tensor(shifted)).values
    assert base.shape == (8, 16, 16)
    np.testing.assert_allclose(moved[:, 1:, 1:], base[:, :-1, :-1], atol=1e-10)


def test_local_shape_mismatch(rng, mini_local):
    with pytest.raises(ShapeError):
        LocalEncoder(mini_local, rng)(Tensor(np.zeros((1, 28, 28))))


def test_import_round_trip_is_bitwise(tmp_path, rng, mini_global):
    source = GlobalEncoder(mini_global, rng)
    target = GlobalEncoder(mini_global, np.random.default_rng(99))
    path = save_checkpoint(Checkpoint(tensors=source.state_dict()), tmp_path / "global.ckpt")
    report = import_weights(target, path)
    assert not report.missing and not report.unexpected
    for name, values in source.state_dict().items():
        assert np.array_equal(target.state_dict()[name], values)


def test_partial_import_warns_once(tmp_path, rng, mini_global, caplog):
    source = GlobalEncoder(mini_global, rng)
    target = GlobalEncoder(mini_global, np.random.default_rng(99))
    before = target.state_dict()
    path = save_checkpoint(Checkpoint(tensors={"cls_token": source.cls_token.values}), tmp_path / "one.ckpt")
    with caplog.at_level(logging.WARNING, logger="networks.backbones"):
        report = import_weights(target, path)
    assert report.loaded == ["cls_token"]
    assert np.array_equal(target.cls_token.values, source.cls_token.values)
    assert np.array_equal(target.pos_embed.values, before["pos_embed"])
    warnings = [r for r in caplog.records if r.levelno == logging.WARNING and r.name == "networks.backbones"]
    assert len(warnings) == 1


def test_import_with_prefix(tmp_path, rng, mini_global):
    source = GlobalEncoder(mini_global, rng)
    target = GlobalEncoder(mini_global, np.random.default_rng(5))
    tensors = {f"global_encoder.{name}": values for name, values in source.state_dict().items()}
    tensors["head.fc1.weight"] = np.zeros((2, 2))
    path = save_checkpoint(Checkpoint(tensors=tensors), tmp_path / "full.ckpt")
    report = import_weights(target, path, prefix="global_encoder.")
    assert not report.missing
    assert np.array_equal(target.pos_embed.values, source.pos_embed.values)


def test_import_shape_conflict_is_an_error(tmp_path, rng, mini_global):
    target = GlobalEncoder(mini_global, rng)
    path = save_checkpoint(Checkpoint(tensors={"cls_token": np.zeros((2, 3))}), tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError, match="shape conflict"):
        import_weights(target, path)


def test_import_rejects_corrupt_magic(tmp_path, rng, mini_global):
    data = bytearray(encode_checkpoint(Checkpoint(tensors={"cls_token": np.zeros((1, 16))})))
    data[:5] = b"XXXXX"
    path = tmp_path / "corrupt.ckpt"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        import_weights(GlobalEncoder(mini_global, rng), path)
