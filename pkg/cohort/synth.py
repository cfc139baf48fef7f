"""
Synthetic weakly-labelled lymph-node cohort.

Each patient is a bag of 32×32 node patches with four radiomics-like scalars.
Metastatic nodes are larger, darker in the interior, carry a bright irregular
rim, and their features shift by ``signal_strength`` standard deviations.
Node-level truth is generated but only reachable through ``truth_labels``.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from config import COMPOSITE_SIZE, GRID_CELLS, MAX_NODES, NODE_PATCH_SIZE
from networks.affinity import RadiomicsVector

logger = logging.getLogger(__name__)

HARMONICS = (3, 4, 5, 6)


@dataclass
class GeneratorSpec:
    n_patients: int = 580
    metastasis_rate: float = 0.5
    nodes_per_patient: Tuple[int, int] = (2, 12)
    signal_strength: float = 2.0
    seed: int = 0
    positive_fraction: float = 0.3
    noise_std: float = 0.03

    def __post_init__(self):
        self.nodes_per_patient = tuple(int(n) for n in self.nodes_per_patient)
        lo, hi = self.nodes_per_patient
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 0.0 <= self.metastasis_rate <= 1.0:
            raise ValueError(f"metastasis_rate must lie in [0, 1], got {self.metastasis_rate}")
        if not 1 <= lo <= hi <= MAX_NODES:
            raise ValueError(f"nodes_per_patient must satisfy 1 <= min <= max <= {MAX_NODES}, got {(lo, hi)}")
        if self.signal_strength < 0:
            raise ValueError(f"signal_strength must be >= 0, got {self.signal_strength}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError(f"positive_fraction must lie in [0, 1], got {self.positive_fraction}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


class NodePatch:
    __slots__ = ("image", "radiomics", "_truth")

    def __init__(self, image: np.ndarray, radiomics: RadiomicsVector, truth_label: int = 0):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (NODE_PATCH_SIZE, NODE_PATCH_SIZE) or not np.all(np.isfinite(image)):
            raise ValueError(f"node image must be a finite {NODE_PATCH_SIZE}×{NODE_PATCH_SIZE} array")
        self.image = image
        self.radiomics = radiomics
        self._truth = int(truth_label)

    def with_image(self, image: np.ndarray) -> "NodePatch":
        return NodePatch(image, self.radiomics, self._truth)

    def __repr__(self):
        return f"NodePatch(f_size={self.radiomics.f_size:.2f})"


class PatientCase:
    def __init__(self, case_id: str, nodes: Sequence[NodePatch], y: int, m: int):
        if not nodes:
            raise ValueError(f"patient {case_id} has no nodes")
        if int(y) != int(m >= 1):
            raise ValueError(f"patient {case_id}: label y={y} inconsistent with m={m}")
        if not 0 <= m <= len(nodes):
            raise ValueError(f"patient {case_id}: m={m} outside 0..{len(nodes)}")
        self.id = case_id
        self.nodes = list(nodes)
        self.y = int(y)
        self.m = int(m)
        self.composite = stitch_composite(self.nodes)

    @property
    def M(self) -> int:
        return len(self.nodes)

    def radiomics_matrix(self) -> np.ndarray:
        return np.stack([node.radiomics.as_array() for node in self.nodes])

    def __repr__(self):
        return f"PatientCase({self.id}, y={self.y}, m={self.m}, M={self.M})"


def node_truth(node: NodePatch) -> int:
    """Planted label of one node; for evaluation and dataset storage only"""
    return node._truth


def truth_labels(case: PatientCase) -> List[int]:
    """Planted node labels; for evaluation and dataset storage only"""
    return [node_truth(node) for node in case.nodes]


def placement_order(nodes: Sequence[NodePatch]) -> List[int]:
    """Node indices by descending f_size (stable), capped at the grid capacity"""
    order = sorted(range(len(nodes)), key=lambda j: -nodes[j].radiomics.f_size)
    return order[:MAX_NODES]


def stitch_composite(nodes: Sequence[NodePatch]) -> np.ndarray:
    if not nodes:
        raise ValueError("cannot stitch a composite from an empty node list")
    composite = np.zeros((1, COMPOSITE_SIZE, COMPOSITE_SIZE))
    for cell, j in enumerate(placement_order(nodes)):
        row, col = divmod(cell, GRID_CELLS)
        top, left = row * NODE_PATCH_SIZE, col * NODE_PATCH_SIZE
        composite[0, top:top + NODE_PATCH_SIZE, left:left + NODE_PATCH_SIZE] = nodes[j].image
    return composite


def render_node(rng: np.random.Generator, truth_label: int, spec: GeneratorSpec) -> NodePatch:
    # Draw count and order are the same for both classes; only the shift differs.
    shift = spec.signal_strength * truth_label
    size_z = rng.normal() + shift
    adc_z = rng.normal() - shift
    ratio = rng.uniform(0.55, 1.0)
    angle = rng.uniform(0.0, np.pi)
    center = (NODE_PATCH_SIZE - 1) / 2.0 + rng.uniform(-2.0, 2.0, size=2)
    amplitudes = rng.normal(size=len(HARMONICS))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(HARMONICS))
    noise = rng.normal(0.0, 1.0, size=(NODE_PATCH_SIZE, NODE_PATCH_SIZE))

    semi_major = float(np.clip(5.0 + size_z, 2.5, 11.0))
    semi_minor = semi_major * ratio
    level = float(np.clip(0.55 + 0.08 * adc_z, 0.15, 0.95))
    irregularity = min(0.08 * shift, 0.3)
    rim_gain = min(0.1 * shift, 0.35)

    rows, cols = np.mgrid[0:NODE_PATCH_SIZE, 0:NODE_PATCH_SIZE].astype(np.float64)
    dx, dy = cols - center[0], rows - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    radius = np.sqrt((u / semi_major) ** 2 + (v / semi_minor) ** 2)
    theta = np.arctan2(v, u)
    wobble = 1.0 + irregularity * sum(a * np.cos(k * theta + p)
                                      for k, a, p in zip(HARMONICS, amplitudes, phases)) / len(HARMONICS)
    radius = radius / np.maximum(wobble, 0.5)

    body = level * np.exp(-radius ** 2)
    rim = rim_gain * np.exp(-((radius - 1.0) / 0.2) ** 2)
    image = np.clip(body + rim + spec.noise_std * noise, 0.0, 1.0)
    image = image.astype(np.float32).astype(np.float64)

    interior = radius < 0.5
    adc = float(body[interior].mean()) if interior.any() else level
    radiomics = RadiomicsVector(f_size=float(np.pi * semi_major * semi_minor), f_SD=float(2.0 * semi_minor),
                                f_RD=float(semi_minor / semi_major), f_ADC=adc)
    return NodePatch(image, radiomics, truth_label)


def generate_patient(spec: GeneratorSpec, index: int) -> PatientCase:
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.nodes_per_patient
    y = int(rng.random() < spec.metastasis_rate)
    count = int(rng.integers(lo, hi + 1))
    m = 1 + int(rng.binomial(count - 1, spec.positive_fraction)) if y else 0
    truth = np.zeros(count, dtype=np.int64)
    truth[rng.choice(count, size=m, replace=False)] = 1
    nodes = [render_node(rng, int(label), spec) for label in truth]
    return PatientCase(f"P{index:04d}", nodes, y, m)


def generate(spec: GeneratorSpec) -> List[PatientCase]:
    """Patients are generated from independent (seed, index) sub-streams"""
    cases = [generate_patient(spec, index) for index in range(spec.n_patients)]
    positives = sum(case.y for case in cases)
    logger.info(f"Generated {len(cases)} patients ({positives} positive, "
                f"{sum(case.M for case in cases)} nodes, signal {spec.signal_strength})")
    return cases


def split_cases(cases: Sequence[PatientCase], fractions: Sequence[float] = (0.7, 0.1, 0.2),
                seed: int = 0) -> Tuple[List[PatientCase], List[PatientCase], List[PatientCase]]:
    """Seeded shuffle into train/val/test by ``fractions``"""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(cases))
    n_train = int(round(fractions[0] * len(cases)))
    n_val = int(round(fractions[1] * len(cases)))
    picked = [cases[i] for i in order]
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]
