"""
Weakly-supervised objective: bag-level multiple-instance loss, label-proportion
loss and the variance-guided regional affinity loss on per-node class maps.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import ops
from autodiff.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    theta_bg: float = 0.3
    delta_bg_fg: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "theta_bg", "delta_bg_fg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.theta_bg + self.delta_bg_fg >= 1.0:
            raise ValueError("theta_bg + delta_bg_fg must stay below 1")


@dataclass
class BatchBags:
    """
    Node probabilities of a batch of patients, flattened on one axis.

    ``bag_slices[i]`` selects patient i's nodes from ``probs``; class maps (if
    present) are stacked in the same node order, and ``map_labels`` holds the
    label used to pick each map's channel.
    """
    probs: Tensor
    bag_slices: List[slice]
    labels: np.ndarray
    positives: np.ndarray
    class_maps: Optional[Tensor] = None
    map_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.positives = np.asarray(self.positives, dtype=np.int64)
        if not (len(self.bag_slices) == len(self.labels) == len(self.positives)):
            raise ValueError("bag slices, labels and positive counts must align")
        for sl, m in zip(self.bag_slices, self.positives):
            size = sl.stop - sl.start
            if not 0 <= m <= size:
                raise ValueError(f"positive count {m} outside 0..{size}")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([sl.stop - sl.start for sl in self.bag_slices], dtype=np.int64)

    @classmethod
    def from_lists(cls, probs: Sequence[Sequence[float]], labels: Sequence[int], positives: Sequence[int],
                   requires_grad: bool = False) -> "BatchBags":
        slices, start = [], 0
        for bag in probs:
            slices.append(slice(start, start + len(bag)))
            start += len(bag)
        flat = np.array([p for bag in probs for p in bag], dtype=np.float64)
        return cls(Tensor(flat, requires_grad=requires_grad), slices, np.asarray(labels), np.asarray(positives))


@dataclass
class LossBreakdown:
    mil: Tensor
    llp: Tensor
    ral: Tensor
    total: Tensor

    def as_floats(self):
        return {"mil": self.mil.item(), "llp": self.llp.item(), "ral": self.ral.item(), "total": self.total.item()}


def _stack(terms: List[Tensor]) -> Tensor:
    return ops.concat([ops.reshape(t, (1,)) for t in terms], axis=0)


def mil_loss(bags: BatchBags) -> Tensor:
    """Bag-level cross-entropy on each patient's highest node probability (summed over patients)"""
    terms = []
    for sl, y in zip(bags.bag_slices, bags.labels):
        if sl.stop <= sl.start:
            raise ValueError("mil_loss needs non-empty bags")
        top = ops.max_(ops.slice_(bags.probs, sl))
        terms.append(ops.log(top) if y == 1 else ops.log(ops.sub(1.0, top)))
    return ops.neg(ops.sum_(_stack(terms)))


def llp_loss(bags: BatchBags) -> Tensor:
    terms = []
    for sl, m in zip(bags.bag_slices, bags.positives):
        size = sl.stop - sl.start
        if size <= 0:
            raise ValueError("llp_loss needs M > 0 for every patient")
        diff = ops.sub(ops.mean(ops.slice_(bags.probs, sl)), m / size)
        terms.append(ops.square(diff))
    return ops.mean(_stack(terms))


def variance_map(z: Tensor) -> Tensor:
    """Per-position variance of softmax class probabilities over the channel axis, N×H×W"""
    z = ops.as_tensor(z)
    if z.ndim != 4:
        raise ShapeError(f"class maps must be N×C×H×W, got {z.shape}")
    return ops.var(ops.softmax(z, axis=1), axis=1)


def dynamic_masks(sigma2: Union[Tensor, np.ndarray], weights: LossWeights) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Background, foreground and active-region masks from a variance field.

    The field is min-max normalized over every position in the batch
    (a constant field normalizes to zero). Masks are plain boolean arrays and
    never carry gradient.
    """
    values = sigma2.values if isinstance(sigma2, Tensor) else np.asarray(sigma2, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    normalized = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    background = normalized < weights.theta_bg
    foreground = normalized > weights.theta_bg + weights.delta_bg_fg
    return background, foreground, background | foreground


def ral_loss(z: Tensor, y_labels: Sequence[int], weights: LossWeights) -> Tensor:
    """
    Penalize confident background positions and unconfident foreground positions
    of each map's labelled channel, averaged over the active region; 0 if it is empty.
    """
    z = ops.as_tensor(z)
    labels = np.asarray(y_labels, dtype=np.int64)
    if z.ndim != 4 or labels.shape != (z.shape[0],):
        raise ShapeError(f"ral_loss needs N×C×H×W maps and N labels, got {z.shape} and {labels.shape}")

    background, foreground, active = dynamic_masks(variance_map(z.detach()), weights)
    count = int(active.sum())
    if count == 0:
        return Tensor(0.0)

    onehot = np.zeros(z.shape)
    onehot[np.arange(z.shape[0]), labels] = 1.0
    chosen = ops.sum_(ops.mul(z, Tensor(onehot)), axis=1)
    confidence = ops.sigmoid(chosen)
    penalty = ops.add(ops.mul(confidence, Tensor(background.astype(np.float64))),
                      ops.mul(ops.sub(1.0, confidence), Tensor(foreground.astype(np.float64))))
    return ops.div(ops.sum_(penalty), float(count))


def total_loss(l_mil, l_llp, l_ra, weights: LossWeights) -> Tensor:
    weighted = ops.add(ops.mul(l_mil, weights.alpha), ops.mul(l_llp, weights.beta))
    return ops.add(weighted, ops.mul(l_ra, weights.gamma))


def compute_losses(bags: BatchBags, weights: LossWeights, use_ral: bool = True) -> LossBreakdown:
    mil = mil_loss(bags)
    llp = llp_loss(bags)
    if use_ral and weights.gamma > 0 and bags.class_maps is not None:
        ral = ral_loss(bags.class_maps, bags.map_labels, weights)
    else:
        ral = Tensor(0.0)
    return LossBreakdown(mil=mil, llp=llp, ral=ral, total=total_loss(mil, llp, ral, weights))
