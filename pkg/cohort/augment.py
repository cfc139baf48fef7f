from dataclasses import dataclass

import numpy as np

from .synth import NodePatch


@dataclass
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    shift: float = 0.0


def sample_params(rng: np.random.Generator, max_angle: float = 15.0, scale_range=(0.9, 1.1),
                  max_shift: float = 0.1) -> AugmentParams:
    return AugmentParams(angle_deg=float(rng.uniform(-max_angle, max_angle)),
                         scale=float(rng.uniform(*scale_range)),
                         shift=float(rng.uniform(-max_shift, max_shift)))


def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional positions; outside the image reads as 0"""
    h, w = image.shape
    r0, c0 = np.floor(rows).astype(np.int64), np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0

    def pick(r, c):
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(inside, image[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)

    return ((1.0 - fr) * (1.0 - fc) * pick(r0, c0) + (1.0 - fr) * fc * pick(r0, c0 + 1)
            + fr * (1.0 - fc) * pick(r0 + 1, c0) + fr * fc * pick(r0 + 1, c0 + 1))


def rotate_scale(image: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate and zoom about the patch centre by inverse mapping, keeping the patch size"""
    if angle_deg == 0.0 and scale == 1.0:
        return image.copy()
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    src_cols = (cos * dx + sin * dy) / scale + cx
    src_rows = (-sin * dx + cos * dy) / scale + cy
    return _bilinear(image, src_rows, src_cols)


def transform_image(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = rotate_scale(image, params.angle_deg, params.scale)
    return np.clip(out + params.shift, 0.0, 1.0)


def augment(patch: NodePatch, rng: np.random.Generator) -> NodePatch:
    """Random rotation, scaling and intensity shift; radiomics and label carry over"""
    return patch.with_image(transform_image(patch.image, sample_params(rng)))
