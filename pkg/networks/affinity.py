"""
Global-local affinity extractor and node head.

Local feature maps become a token stream that cross-attends, one scale at a
time, to the global encoder's tapped token sequences; the refined stream is
unembedded back to a feature map and pooled into the node prediction.
"""
import logging
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.tensor import ShapeError, Tensor
from config import FEATURE_MAP_SIZE, NUM_CLASSES, RADIOMICS_FIELDS

from .backbones import FeaturePyramid
from .layers import (Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, parameter,
                     patchify, trunc_normal)

logger = logging.getLogger(__name__)


@dataclass
class AffinityConfig:
    local_channels: int = 64
    global_dim: int = 96
    token_dim: int = 64
    dim: int = 64
    heads: int = 4
    patch_size: int = 1
    feature_size: int = FEATURE_MAP_SIZE
    scales: Tuple[int, ...] = (1, 5, 9)
    mlp_ratio: int = 2
    include_global_cls: bool = True
    head_hidden: int = 32

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if self.dim % self.heads:
            raise ValueError(f"attention dim {self.dim} not divisible by {self.heads} heads")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError(f"duplicate scales in {self.scales}")

    @property
    def grid(self) -> int:
        return self.feature_size // self.patch_size


@dataclass
class RadiomicsVector:
    f_size: float
    f_SD: float
    f_RD: float
    f_ADC: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in RADIOMICS_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "RadiomicsVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != len(RADIOMICS_FIELDS):
            raise ValueError(f"expected {len(RADIOMICS_FIELDS)} radiomics values, got {values.size}")
        return cls(*(float(v) for v in values))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class RadiomicsScaler:
    """Per-feature standardization frozen after ``fit``"""

    def __init__(self, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        width = len(RADIOMICS_FIELDS)
        self.mean = np.zeros(width) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(width) if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, raw: np.ndarray) -> "RadiomicsScaler":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != len(RADIOMICS_FIELDS) or raw.shape[0] == 0:
            raise ValueError(f"radiomics fit needs an N×{len(RADIOMICS_FIELDS)} array, got {raw.shape}")
        self.mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        # constant features pass through centred
        self.std = np.where(std > 0.0, std, 1.0)
        return self

    def transform(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std


@dataclass
class NodePrediction:
    p: Tensor
    class_map: Tensor
    attended: Tensor
    logit: Tensor


class TokenEmbed(Module):
    def __init__(self, config: AffinityConfig, rng: np.random.Generator):
        if config.feature_size % config.patch_size:
            raise ShapeError(f"feature map size {config.feature_size} not divisible by "
                             f"embed patch size {config.patch_size}")
        self.patch_size = config.patch_size
        self.token_dim = config.token_dim
        self.proj = Linear(config.local_channels * config.patch_size ** 2, config.token_dim, rng)
        self.cls_token = parameter(trunc_normal(rng, (1, config.token_dim)))
        self.pos_embed = parameter(trunc_normal(rng, (config.grid ** 2 + 1, config.token_dim)))

    def forward(self, features: Tensor) -> Tensor:
        tokens = self.proj(patchify(features, self.patch_size))
        batch = tokens.shape[0]
        if tokens.shape[1] + 1 != self.pos_embed.shape[0]:
            raise ShapeError(f"feature map gives {tokens.shape[1]} tokens, "
                             f"positions cover {self.pos_embed.shape[0] - 1}")
        cls = ops.expand(self.cls_token, (batch, 1, self.token_dim))
        x = ops.concat([cls, tokens], axis=1)
        return ops.add(x, ops.expand(self.pos_embed, x.shape))


class CrossAttentionBlock(Module):
    """Pre-norm block: local queries attend to global keys/values, then an MLP, both residual"""

    def __init__(self, config: AffinityConfig, rng: np.random.Generator):
        self.norm_q = LayerNorm(config.token_dim)
        self.norm_kv = LayerNorm(config.global_dim)
        self.attn = MultiHeadAttention(config.token_dim, config.global_dim, config.dim, config.heads, rng)
        self.norm_mlp = LayerNorm(config.token_dim)
        self.mlp = Mlp(config.token_dim, config.token_dim * config.mlp_ratio, rng)

    def forward(self, tokens: Tensor, context: Tensor) -> Tensor:
        x = ops.add(tokens, self.attn(self.norm_q(tokens), self.norm_kv(context)))
        return ops.add(x, self.mlp(self.norm_mlp(x)))


class Unembed(Module):
    def __init__(self, config: AffinityConfig, rng: np.random.Generator):
        self.grid = config.grid
        self.proj = ConvTranspose2d(config.token_dim, config.local_channels, config.patch_size, rng,
                                    stride=config.patch_size)

    def forward(self, tokens: Tensor) -> Tensor:
        n, _, d = tokens.shape
        spatial = ops.slice_(tokens, (slice(None), slice(1, None), slice(None)))
        spatial = ops.reshape(spatial, (n, self.grid, self.grid, d))
        return self.proj(ops.transpose(spatial, (0, 3, 1, 2)))


class AffinityExtractor(Module):
    def __init__(self, config: AffinityConfig, rng: np.random.Generator):
        self.config = config
        self.embed = TokenEmbed(config, rng)
        self.blocks = {str(scale): CrossAttentionBlock(config, rng) for scale in config.scales}
        self.unembed = Unembed(config, rng)

    def cross_attend(self, tokens: Tensor, context: Tensor, scale: int) -> Tensor:
        block = self.blocks.get(str(scale))
        if block is None:
            raise ValueError(f"no cross-attention block for scale {scale}; have {self.config.scales}")
        if not self.config.include_global_cls:
            context = ops.slice_(context, (slice(None), slice(1, None), slice(None)))
        return block(tokens, context)

    def forward(self, local_features: Tensor, pyramid: FeaturePyramid,
                node_owner: Optional[np.ndarray] = None) -> Tensor:
        """
        Fuse local maps with global context.

        Args:
            local_features: C_l×H×W for one node or N×C_l×H×W for a batch of nodes
            pyramid: tapped global tokens, T×d_g for one patient or B×T×d_g
            node_owner: patient row in the pyramid for every node; defaults to row 0

        Returns:
            attended feature maps with the same shape as ``local_features``
        """
        single = local_features.ndim == 3
        x = ops.reshape(local_features, (1,) + local_features.shape) if single else local_features
        if node_owner is None:
            node_owner = np.zeros(x.shape[0], dtype=np.int64)

        tokens = self.embed(x)
        for scale in self.config.scales:
            context = pyramid[scale]
            if context.ndim == 2:
                context = ops.reshape(context, (1,) + context.shape)
            tokens = self.cross_attend(tokens, ops.take(context, node_owner, axis=0), scale)
        out = self.unembed(tokens)
        return ops.reshape(out, out.shape[1:]) if single else out


class NodeHead(Module):
    """Pooled attended features joined with radiomics → node probability; 1x1 conv → class map"""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(channels + len(RADIOMICS_FIELDS), hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.class_conv = Conv2d(channels, NUM_CLASSES, 1, rng)

    def forward(self, features: Tensor, radiomics: Tensor) -> NodePrediction:
        if not np.all(np.isfinite(radiomics.values)):
            raise ValueError("radiomics features must be finite")
        n = features.shape[0]
        pooled = ops.mean(features, axis=(2, 3))
        joined = ops.concat([pooled, radiomics], axis=1)
        logit = ops.reshape(self.fc2(ops.relu(self.fc1(joined))), (n,))
        return NodePrediction(p=ops.sigmoid(logit), class_map=self.class_conv(features),
                              attended=features, logit=logit)


def embed(extractor: AffinityExtractor, local_features) -> Tensor:
    features = ops.as_tensor(local_features)
    if features.ndim == 3:
        tokens = extractor.embed(ops.reshape(features, (1,) + features.shape))
        return ops.reshape(tokens, tokens.shape[1:])
    return extractor.embed(features)


def extract(extractor: AffinityExtractor, local_features, pyramid: FeaturePyramid) -> Tensor:
    return extractor(ops.as_tensor(local_features), pyramid)


def predict_node(head: NodeHead, attended, radiomics) -> NodePrediction:
    """Single-node convenience wrapper; ``radiomics`` is an already standardized vector"""
    features = ops.as_tensor(attended)
    values = radiomics.as_array() if isinstance(radiomics, RadiomicsVector) else np.asarray(radiomics)
    if features.ndim == 3:
        features = ops.reshape(features, (1,) + features.shape)
        values = values.reshape(1, -1)
    return head(features, Tensor(values))
