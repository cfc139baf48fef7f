import logging
import os
from typing import List

import numpy as np
from PIL import Image

from autodiff import ops
from cohort.synth import PatientCase
from config import METASTATIC_CHANNEL, NODE_PATCH_SIZE
from networks.wega import WeGAModel

from .trainer import collate

logger = logging.getLogger(__name__)


def heatmap_pixels(class_map: np.ndarray) -> np.ndarray:
    """Metastatic-channel probability of one C×h×w logit map as a 32×32 uint8 image"""
    probs = ops.sigmoid(class_map[METASTATIC_CHANNEL]).values
    factor = NODE_PATCH_SIZE // probs.shape[0]
    upsampled = np.repeat(np.repeat(probs, factor, axis=0), factor, axis=1)
    return np.round(255.0 * upsampled).astype(np.uint8)


def export_heatmap(model: WeGAModel, case: PatientCase, out_dir: str) -> List[str]:
    """Write one binary PGM per node of ``case``; returns the written paths"""
    os.makedirs(out_dir, exist_ok=True)
    class_maps = model(collate([case])).class_map.values
    paths = []
    for j, class_map in enumerate(class_maps):
        path = os.path.join(out_dir, f"{case.id}_node{j:02d}.pgm")
        Image.fromarray(heatmap_pixels(class_map)).save(path, format="PPM")
        paths.append(path)
    logger.info(f"Wrote {len(paths)} heatmaps for {case.id} to {out_dir}")
    return paths
