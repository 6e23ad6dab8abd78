"""
Dense correspondence through the shared template space.

Shapes are deformed into template space with their latent codes; attributes move
from source to target by distance-weighted voting among deformed neighbours, and
keypoints by an inverse nearest-neighbour lookup on the target surface.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.autodiff import ParamVector
from ..core.errors import ConfigurationError, DomainError
from ..core.fields import TemplateModel, deform
from ..core.losses import uncertainty
from ..geometry.sample import KeypointSet, ShapeSample
from ..geometry.spatial import SpatialIndex

logger = logging.getLogger(__name__)

__all__ = [
    "KeypointSet", "DeformedShape", "CorrespondenceModel", "TransferResult",
    "vote_attributes", "transfer_attributes", "transfer_keypoints",
]

VOTE_EPS = 1e-12
DEFAULT_NEIGHBORS = 10


@dataclass
class DeformedShape:
    """A shape's surface samples next to their template-space images"""
    sample: ShapeSample
    z: np.ndarray
    delta: np.ndarray

    @property
    def surface(self) -> np.ndarray:
        return self.sample.surface

    @property
    def deformed(self) -> np.ndarray:
        return self.sample.surface + self.delta


class CorrespondenceModel:
    """Read-only view of a trained model for deforming shapes into template space"""

    def __init__(self, model: TemplateModel, params: ParamVector):
        self.model = model
        self.params = params

    def code(self, index: int) -> np.ndarray:
        return np.asarray(self.model.latent(self.params, index), dtype=np.float64)

    def deform_points(self, points: np.ndarray, features: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Displacement dx of each point (template-space image is points + dx)"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return np.zeros((0, 3))
        alpha = self.model.sdc(np.asarray(features), self.model.priors(self.params))
        out = deform(points, np.asarray(z, dtype=np.float64), alpha, self.params, self.model)
        return np.asarray(out.delta_x)

    def deform_shape(self, sample: ShapeSample, z: np.ndarray) -> DeformedShape:
        delta = self.deform_points(sample.surface, sample.surface_features, z)
        return DeformedShape(sample=sample, z=np.asarray(z, dtype=np.float64), delta=delta)


@dataclass
class TransferResult:
    """Transferred per-point values with their correspondence uncertainty"""
    values: np.ndarray
    uncertainty: np.ndarray
    neighbors: int

    @property
    def mean_uncertainty(self) -> float:
        return float(self.uncertainty.mean()) if self.uncertainty.size else 0.0


def vote_attributes(
    source_points: np.ndarray,
    source_values: np.ndarray,
    target_points: np.ndarray,
    n: int = DEFAULT_NEIGHBORS,
    categorical: bool = True,
) -> np.ndarray:
    """
    Weighted k-nearest-neighbour transfer with weights 1 / (d^2 + 1e-12).

    Categorical values take the label with the largest summed weight (smallest label
    on ties); continuous values take the weighted mean.
    """
    source_values = np.asarray(source_values)
    if len(source_points) == 0:
        raise DomainError("Cannot transfer attributes from an empty source")
    if len(source_values) != len(source_points):
        raise ConfigurationError(
            f"{len(source_values)} attribute rows for {len(source_points)} source points"
        )
    if n < 1:
        raise ConfigurationError(f"Neighbour count must be positive, got {n}")
    if n > len(source_points):
        logger.warning(f"Neighbour count {n} exceeds source size {len(source_points)}, clamping")
        n = len(source_points)

    target_points = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(target_points) == 0:
        return source_values[:0].copy()

    idx, d2 = SpatialIndex(source_points).knn(target_points, n)
    weights = 1.0 / (d2 + VOTE_EPS)

    if categorical:
        classes, codes = np.unique(source_values.astype(np.int64), return_inverse=True)
        scores = np.zeros((len(target_points), len(classes)))
        rows = np.repeat(np.arange(len(target_points)), n)
        np.add.at(scores, (rows, codes.reshape(-1)[idx].ravel()), weights.ravel())
        return classes[np.argmax(scores, axis=1)]

    weights = weights / weights.sum(axis=1, keepdims=True)
    return np.einsum("tn,tn...->t...", weights, source_values.astype(np.float64)[idx])


def _pool(sources: Sequence[DeformedShape], values: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack every source's surface, template image and attributes into one set"""
    if len(sources) != len(values):
        raise ConfigurationError(f"{len(values)} attribute arrays for {len(sources)} sources")
    points = np.concatenate([s.surface for s in sources], axis=0)
    deformed = np.concatenate([s.deformed for s in sources], axis=0)
    pooled = np.concatenate([np.asarray(v) for v in values], axis=0)
    return points, deformed, pooled


def correspondence_uncertainty(
    sources: Sequence[DeformedShape], target: DeformedShape, gamma: float
) -> np.ndarray:
    """u(p, q) of each target point against its nearest deformed source point"""
    points, deformed, _ = _pool(sources, [s.surface for s in sources])
    if len(target.surface) == 0:
        return np.zeros(0)
    idx, _ = SpatialIndex(deformed).nearest(target.deformed)
    return uncertainty(points[idx], deformed[idx] - points[idx], target.surface, target.delta, gamma)


def transfer_attributes(
    sources: Union[DeformedShape, Sequence[DeformedShape]],
    values: Union[np.ndarray, Sequence[np.ndarray]],
    target: DeformedShape,
    n: int = DEFAULT_NEIGHBORS,
    categorical: bool = True,
    gamma: float = 10.0,
) -> TransferResult:
    """
    Move per-point attributes from one or several source shapes onto the target.

    Several sources are pooled into a single voting set.
    """
    if isinstance(sources, DeformedShape):
        sources, values = [sources], [values]
    if not sources:
        raise DomainError("Attribute transfer needs at least one source shape")

    _, deformed, pooled = _pool(sources, values)
    result = vote_attributes(deformed, pooled, target.deformed, n=n, categorical=categorical)
    u = correspondence_uncertainty(sources, target, gamma)
    logger.debug(
        f"Transferred {len(pooled)} source values onto '{target.sample.name}' "
        f"from {len(sources)} shape(s), mean uncertainty {u.mean() if u.size else 0.0:.4g}"
    )
    return TransferResult(values=result, uncertainty=u, neighbors=min(n, len(pooled)))


def transfer_keypoints(
    keypoints: KeypointSet,
    source: DeformedShape,
    target: DeformedShape,
    corr: CorrespondenceModel,
) -> KeypointSet:
    """
    Map named keypoints from the source onto the target surface.

    Each keypoint takes the semantic features of its nearest source sample, is
    deformed into template space, and lands on the target surface point whose
    template image is closest.
    """
    if len(keypoints) == 0:
        return KeypointSet()
    if len(target.surface) == 0:
        raise DomainError(f"Target shape '{target.sample.name}' has no surface points")

    features = source.sample.feature_fn()(keypoints.points)
    delta = corr.deform_points(keypoints.points, features, source.z)
    idx, _ = SpatialIndex(target.deformed).nearest(keypoints.points + delta)
    return KeypointSet(list(keypoints.names), target.surface[idx])


def label_errors(predicted: np.ndarray, truth: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Boolean mask of wrongly transferred labels, or None without ground truth"""
    if truth is None:
        return None
    return np.asarray(predicted) != np.asarray(truth)


def split_uncertainty(u: np.ndarray, wrong: np.ndarray) -> Tuple[float, float]:
    """Mean uncertainty of correctly and incorrectly voted points (nan when empty)"""
    right = u[~wrong]
    bad = u[wrong]
    return (
        float(right.mean()) if right.size else float("nan"),
        float(bad.mean()) if bad.size else float("nan"),
    )


def deform_many(corr: CorrespondenceModel, samples: Sequence[ShapeSample], codes: Sequence[np.ndarray]) -> List[DeformedShape]:
    return [corr.deform_shape(sample, z) for sample, z in zip(samples, codes)]
