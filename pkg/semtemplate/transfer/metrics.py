import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from ..core.errors import DomainError
from ..geometry.sample import KeypointSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.05, 0.1)


def pck(predicted: KeypointSet, truth: KeypointSet, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict[float, float]:
    """Percentage of keypoints within each Euclidean threshold, over the names both sets share"""
    have = set(predicted.names)
    names = [name for name in truth.names if name in have]
    if not names:
        raise DomainError("PCK needs at least one keypoint present in both sets")
    if len(names) < len(truth):
        logger.warning(f"{len(truth) - len(names)} ground-truth keypoints have no prediction")

    gap = np.linalg.norm(predicted.subset(names).points - truth.subset(names).points, axis=1)
    return {float(t): float(100.0 * np.mean(gap <= t)) for t in thresholds}


def part_iou(predicted: np.ndarray, truth: np.ndarray, n_parts: int) -> Dict[int, float]:
    """IoU per part; parts absent from both labelings are left out"""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise DomainError(f"Label arrays differ in shape: {predicted.shape} vs {truth.shape}")

    ious = {}
    for part in range(n_parts):
        p, t = predicted == part, truth == part
        union = np.count_nonzero(p | t)
        if union:
            ious[part] = np.count_nonzero(p & t) / union
    return ious


def miou(predicted: np.ndarray, truth: np.ndarray, n_parts: int) -> float:
    ious = part_iou(predicted, truth, n_parts)
    if not ious:
        raise DomainError("mIoU is undefined when no part occurs in either labeling")
    return float(np.mean(list(ious.values())))


@dataclass
class TransferReport:
    """Metrics of one transfer: PCK per threshold, IoU per part, per-point uncertainty"""
    pck: Dict[float, float] = field(default_factory=dict)
    iou: Dict[int, float] = field(default_factory=dict)
    uncertainty: np.ndarray = field(default_factory=lambda: np.zeros(0))
    uncertainty_correct: Optional[float] = None
    uncertainty_wrong: Optional[float] = None

    def __post_init__(self):
        for t, value in self.pck.items():
            if not 0.0 <= value <= 100.0:
                raise DomainError(f"PCK@{t} out of range: {value}")
        for part, value in self.iou.items():
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"IoU of part {part} out of range: {value}")

    @property
    def miou(self) -> Optional[float]:
        return float(np.mean(list(self.iou.values()))) if self.iou else None

    @property
    def mean_uncertainty(self) -> Optional[float]:
        return float(self.uncertainty.mean()) if self.uncertainty.size else None

    def rows(self):
        """(metric, value) pairs for CSV output"""
        for t, value in sorted(self.pck.items()):
            yield f"pck_{t:g}", value
        for part, value in sorted(self.iou.items()):
            yield f"iou_part{part}", value
        if self.miou is not None:
            yield "miou", self.miou
        if self.mean_uncertainty is not None:
            yield "uncertainty_mean", self.mean_uncertainty
        if self.uncertainty_correct is not None:
            yield "uncertainty_correct", self.uncertainty_correct
        if self.uncertainty_wrong is not None:
            yield "uncertainty_wrong", self.uncertainty_wrong
