"""
WeGA Model - dual-branch network and the factory that builds its variants
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from autodiff.tensor import Tensor

from .affinity import AffinityConfig, AffinityExtractor, NodeHead, NodePrediction, RadiomicsScaler
from .backbones import GlobalEncoder, GlobalEncoderConfig, LocalEncoder, LocalEncoderConfig
from .layers import Module

logger = logging.getLogger(__name__)


@dataclass
class ModelBatch:
    """Patients flattened to one node axis; ``node_owner[j]`` is the patient row of node j"""
    composites: np.ndarray
    patches: np.ndarray
    radiomics: np.ndarray
    node_owner: np.ndarray
    bag_slices: List[slice]

    @property
    def num_patients(self) -> int:
        return self.composites.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.patches.shape[0]


class WeGAModel(Module):
    def __init__(self, global_config: GlobalEncoderConfig, local_config: LocalEncoderConfig,
                 affinity_config: AffinityConfig, use_gae: bool = True, seed: int = 0):
        _check_compatible(global_config, local_config, affinity_config, use_gae)
        rng = np.random.default_rng(seed)
        self.use_gae = use_gae
        self.local_encoder = LocalEncoder(local_config, rng)
        self.global_encoder = GlobalEncoder(global_config, rng) if use_gae else None
        self.affinity = AffinityExtractor(affinity_config, rng) if use_gae else None
        self.head = NodeHead(local_config.out_channels, affinity_config.head_hidden, rng)
        # frozen standardization, fitted on the training split
        self.radiomics_mean = Tensor(np.zeros(4))
        self.radiomics_std = Tensor(np.ones(4))

    @property
    def scaler(self) -> RadiomicsScaler:
        return RadiomicsScaler(self.radiomics_mean.values, self.radiomics_std.values)

    def fit_radiomics(self, raw: np.ndarray) -> None:
        scaler = RadiomicsScaler().fit(raw)
        self.radiomics_mean.values = scaler.mean.copy()
        self.radiomics_std.values = scaler.std.copy()
        logger.info(f"Radiomics standardization fitted on {len(raw)} nodes")

    def forward(self, batch: ModelBatch) -> NodePrediction:
        local = self.local_encoder(Tensor(batch.patches))
        if self.use_gae:
            pyramid = self.global_encoder(Tensor(batch.composites))
            attended = self.affinity(local, pyramid, batch.node_owner)
        else:
            attended = local
        radiomics = Tensor(self.scaler.transform(batch.radiomics))
        return self.head(attended, radiomics)


def _check_compatible(global_config: GlobalEncoderConfig, local_config: LocalEncoderConfig,
                      affinity_config: AffinityConfig, use_gae: bool) -> None:
    if local_config.out_channels != affinity_config.local_channels:
        raise ValueError(f"local encoder emits {local_config.out_channels} channels, "
                         f"affinity expects {affinity_config.local_channels}")
    if not use_gae:
        return
    if local_config.output_size != affinity_config.feature_size:
        raise ValueError(f"local encoder emits {local_config.output_size}px maps, "
                         f"affinity expects {affinity_config.feature_size}px")
    if global_config.dim != affinity_config.global_dim:
        raise ValueError(f"global dim {global_config.dim} != affinity global_dim {affinity_config.global_dim}")
    missing = set(affinity_config.scales) - set(global_config.taps)
    if missing:
        raise ValueError(f"affinity scales {sorted(missing)} are not global encoder taps {global_config.taps}")


class ModelFactory:
    """Factory class for creating WeGA model variants"""

    @staticmethod
    def create_model(variant: str, global_config: Optional[GlobalEncoderConfig] = None,
                     local_config: Optional[LocalEncoderConfig] = None,
                     affinity_config: Optional[AffinityConfig] = None, seed: int = 0) -> WeGAModel:
        """
        Create a model of the specified variant

        Args:
            variant (str): 'wega' for the dual-branch model, 'local_only' without the global branch
            seed (int): initialization seed

        Returns:
            WeGAModel instance of the specified variant
        """
        global_config = global_config or GlobalEncoderConfig()
        local_config = local_config or LocalEncoderConfig()
        affinity_config = affinity_config or AffinityConfig()
        if variant == 'wega':
            return WeGAModel(global_config, local_config, affinity_config, use_gae=True, seed=seed)
        elif variant == 'local_only':
            return WeGAModel(global_config, local_config, affinity_config, use_gae=False, seed=seed)
        else:
            raise ValueError(f"Unknown model variant: {variant}")

    @staticmethod
    def from_config(config) -> WeGAModel:
        """Build the variant a TrainConfig asks for"""
        variant = 'wega' if config.use_gae else 'local_only'
        return ModelFactory.create_model(variant, config.global_encoder, config.local_encoder,
                                         config.affinity, seed=config.seed)
