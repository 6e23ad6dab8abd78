import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ConfigurationError, DataFormatError
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


@dataclass
class KeypointSet:
    """Named 3D keypoints; names are unique"""
    names: List[str] = field(default_factory=list)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(set(self.names)) != len(self.names):
            raise DataFormatError(f"Keypoint names are not unique: {self.names}")
        if len(self.names) != len(self.points):
            raise DataFormatError(
                f"{len(self.names)} keypoint names for {len(self.points)} points"
            )

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(zip(self.names, self.points))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: point for name, point in self}

    def subset(self, names: Sequence[str]) -> "KeypointSet":
        lookup = self.as_dict()
        return KeypointSet(list(names), np.array([lookup[n] for n in names]).reshape(-1, 3))


@dataclass
class ShapeSample:
    """Surface and query samples of one shape with their semantic features"""
    surface: np.ndarray
    surface_features: np.ndarray
    query: np.ndarray
    sdf: np.ndarray
    query_features: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    keypoints: KeypointSet = field(default_factory=KeypointSet)
    name: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def n_parts(self) -> int:
        return int(self.surface_features.shape[1])

    @property
    def n_surface(self) -> int:
        return len(self.surface)

    @property
    def n_query(self) -> int:
        return len(self.query)

    def validate(self) -> None:
        """Check array shapes against each other"""
        n_s, n_q = len(self.surface), len(self.query)
        checks = [
            (self.surface.shape == (n_s, 3), "surface points must be (N, 3)"),
            (self.query.shape == (n_q, 3), "query points must be (N, 3)"),
            (self.surface_features.ndim == 2 and len(self.surface_features) == n_s,
             "one surface feature row per surface point"),
            (self.query_features.ndim == 2 and len(self.query_features) == n_q,
             "one query feature row per query point"),
            (self.sdf.shape == (n_q,), "one SDF value per query point"),
            (self.normals is None or self.normals.shape == (n_s, 3), "one normal per surface point"),
            (self.labels is None or self.labels.shape == (n_s,), "one label per surface point"),
        ]
        for ok, message in checks:
            if not ok:
                raise DataFormatError(f"Shape '{self.name}': {message}")
        if self.surface_features.shape[1] != self.query_features.shape[1]:
            raise DataFormatError(f"Shape '{self.name}': surface and query features disagree on k")

    def part_labels(self) -> np.ndarray:
        """Stored labels, else the argmax of the surface features"""
        if self.labels is not None:
            return self.labels
        return np.argmax(self.surface_features, axis=1)

    def require_normals(self) -> np.ndarray:
        if self.normals is None:
            raise ConfigurationError(f"Shape '{self.name}' has no surface normals")
        return self.normals

    def subsample(self, rng: np.random.Generator, n_surface: int, n_query: int) -> "ShapeSample":
        """Uniform subsample without replacement (all points kept when fewer are available)"""
        s_idx = _choose(rng, self.n_surface, n_surface)
        q_idx = _choose(rng, self.n_query, n_query)
        return replace(
            self,
            surface=self.surface[s_idx],
            surface_features=self.surface_features[s_idx],
            normals=None if self.normals is None else self.normals[s_idx],
            labels=None if self.labels is None else self.labels[s_idx],
            query=self.query[q_idx],
            sdf=self.sdf[q_idx],
            query_features=self.query_features[q_idx],
        )

    def feature_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        """Semantic features at arbitrary points, taken from the nearest sample point"""
        points = np.concatenate([self.surface, self.query], axis=0)
        features = np.concatenate([self.surface_features, self.query_features], axis=0)
        index = SpatialIndex(points)

        def lookup(x: np.ndarray) -> np.ndarray:
            idx, _ = index.nearest(np.atleast_2d(x))
            return features[idx]

        return lookup

    def same_as(self, other: "ShapeSample") -> bool:
        """Bit-exact equality of every array and the keypoints"""
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            eq(self.surface, other.surface)
            and eq(self.surface_features, other.surface_features)
            and eq(self.query, other.query)
            and eq(self.sdf, other.sdf)
            and eq(self.query_features, other.query_features)
            and eq(self.normals, other.normals)
            and eq(self.labels, other.labels)
            and self.keypoints.names == other.keypoints.names
            and eq(self.keypoints.points, other.keypoints.points)
        )


def _choose(rng: np.random.Generator, available: int, wanted: int) -> np.ndarray:
    if wanted >= available:
        return np.arange(available)
    return np.sort(rng.choice(available, size=wanted, replace=False))
