import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from autodiff import ops
from autodiff.tensor import ShapeError, Tensor
from checkpoint import CheckpointError, load_checkpoint
from config import COMPOSITE_SIZE, NODE_PATCH_SIZE

from .layers import Conv2d, LayerNorm, Linear, Module, TransformerBlock, parameter, patchify, trunc_normal

logger = logging.getLogger(__name__)


@dataclass
class GlobalEncoderConfig:
    image_size: int = COMPOSITE_SIZE
    patch_size: int = 16
    depth: int = 12
    dim: int = 96
    heads: int = 4
    mlp_ratio: int = 4
    taps: Tuple[int, ...] = (1, 5, 9)
    in_channels: int = 1

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.taps or min(self.taps) < 1 or max(self.taps) > self.depth:
            raise ValueError(f"taps {self.taps} must lie in 1..{self.depth}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class LocalEncoderConfig:
    input_size: int = NODE_PATCH_SIZE
    in_channels: int = 1
    stem_channels: int = 32
    out_channels: int = 64
    blocks_per_stage: int = 2
    stem_stride: int = 2
    stage_stride: int = 2

    def __post_init__(self):
        stride = self.stem_stride * self.stage_stride
        if self.input_size % stride:
            raise ValueError(f"input_size {self.input_size} not divisible by total stride {stride}")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be non-negative")

    @property
    def output_size(self) -> int:
        return self.input_size // (self.stem_stride * self.stage_stride)


class FeaturePyramid:
    """Token sequences tapped after selected global encoder blocks, keyed by 1-based block index"""

    def __init__(self, levels: Dict[int, Tensor]):
        self.levels = levels

    def __getitem__(self, tap: int) -> Tensor:
        if tap not in self.levels:
            raise KeyError(f"no tap after block {tap}; available {sorted(self.levels)}")
        return self.levels[tap]

    @property
    def taps(self) -> List[int]:
        return sorted(self.levels)


class GlobalEncoder(Module):
    """
    ViT over the stitched composite: patch embedding, class token, learned
    positions, then pre-norm transformer blocks. Block outputs at ``taps``
    form the feature pyramid.
    """

    def __init__(self, config: GlobalEncoderConfig, rng: np.random.Generator):
        self.config = config
        patch_dim = config.in_channels * config.patch_size ** 2
        self.patch_embed = Linear(patch_dim, config.dim, rng)
        self.cls_token = parameter(trunc_normal(rng, (1, config.dim)))
        self.pos_embed = parameter(trunc_normal(rng, (config.num_patches + 1, config.dim)))
        self.blocks = [TransformerBlock(config.dim, config.heads, config.mlp_ratio, rng)
                       for _ in range(config.depth)]

    def forward(self, images: Tensor) -> FeaturePyramid:
        cfg = self.config
        single = images.ndim == 3
        x = ops.reshape(images, (1,) + images.shape) if single else images
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"global encoder expects {expected} images, got {images.shape}")

        tokens = self.patch_embed(patchify(x, cfg.patch_size))
        batch = tokens.shape[0]
        cls = ops.expand(self.cls_token, (batch, 1, cfg.dim))
        x = ops.concat([cls, tokens], axis=1)
        x = ops.add(x, ops.expand(self.pos_embed, x.shape))

        levels = {}
        deepest = max(cfg.taps)
        # blocks past the deepest tap cannot reach any output
        for index, block in enumerate(self.blocks[:deepest], start=1):
            x = block(x)
            if index in cfg.taps:
                levels[index] = ops.reshape(x, x.shape[1:]) if single else x
        return FeaturePyramid(levels)


class BasicBlock(Module):
    """conv3x3 → norm → relu → conv3x3 → norm, plus identity or 1x1-projected shortcut, then relu"""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1, bias=False)
        self.norm1 = LayerNorm(out_channels, axis=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1, bias=False)
        self.norm2 = LayerNorm(out_channels, axis=1)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride, bias=False)
            self.shortcut_norm = LayerNorm(out_channels, axis=1)
        else:
            self.shortcut = None
            self.shortcut_norm = None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x))
        return ops.relu(ops.add(out, identity))


class LocalEncoder(Module):
    # Norms act per pixel across channels so the encoder stays translation covariant
    def __init__(self, config: LocalEncoderConfig, rng: np.random.Generator):
        self.config = config
        c_stem, c_out = config.stem_channels, config.out_channels
        self.stem = Conv2d(config.in_channels, c_stem, 3, rng, stride=config.stem_stride, padding=1)
        self.stem_norm = LayerNorm(c_stem, axis=1)
        self.stage1 = [BasicBlock(c_stem, c_stem, 1, rng) for _ in range(config.blocks_per_stage)]
        self.down = BasicBlock(c_stem, c_out, config.stage_stride, rng)
        self.stage2 = [BasicBlock(c_out, c_out, 1, rng) for _ in range(config.blocks_per_stage)]

    def forward(self, patches: Tensor) -> Tensor:
        cfg = self.config
        single = patches.ndim == 3
        x = ops.reshape(patches, (1,) + patches.shape) if single else patches
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"local encoder expects {expected} patches, got {patches.shape}")

        x = ops.relu(self.stem_norm(self.stem(x)))
        for block in self.stage1:
            x = block(x)
        x = self.down(x)
        for block in self.stage2:
            x = block(x)
        return ops.reshape(x, x.shape[1:]) if single else x


def global_encode(encoder: GlobalEncoder, composite) -> FeaturePyramid:
    return encoder(ops.as_tensor(composite))


def local_encode(encoder: LocalEncoder, patch) -> Tensor:
    return encoder(ops.as_tensor(patch))


@dataclass
class ImportReport:
    loaded: List[str]
    missing: List[str]
    unexpected: List[str]


def import_weights(module: Module, path: Union[str, Path], prefix: str = "") -> ImportReport:
    """
    Load named tensors from a checkpoint into ``module``.

    Names in the file are matched after stripping ``prefix``; tensors the file
    lacks keep their current values.

    Raises:
        CheckpointError: unreadable file, bad format, or a shape conflict
    """
    checkpoint = load_checkpoint(path)
    own = dict(module.named_tensors())
    stored = {name[len(prefix):]: values for name, values in checkpoint.tensors.items()
              if name.startswith(prefix)}

    conflicts = [f"{name}: file {values.shape}, model {own[name].shape}"
                 for name, values in stored.items() if name in own and values.shape != own[name].shape]
    if conflicts:
        raise CheckpointError(f"shape conflict importing {path}: {'; '.join(conflicts)}")

    loaded = []
    for name, values in stored.items():
        if name in own:
            own[name].values = np.array(values, dtype=np.float64)
            loaded.append(name)
    missing = [name for name in own if name not in stored]
    unexpected = [name for name in stored if name not in own]

    if missing:
        logger.warning(f"⚠️ {len(missing)} tensors not found in {path}; kept current values")
    if unexpected:
        logger.warning(f"⚠️ {len(unexpected)} tensors in {path} have no match: {unexpected[:5]}")
    logger.info(f"Imported {len(loaded)} tensors from {path}")
    return ImportReport(loaded=loaded, missing=missing, unexpected=unexpected)
