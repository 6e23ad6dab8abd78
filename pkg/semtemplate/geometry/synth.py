"""
Procedural part-labelled shapes with exact signed distance functions.

Each shape is a union (plain min) of boxes and capsules tagged with a part id.
SDFs are written with the autodiff primitives, so surface normals come from the
same ``Dual3`` machinery as the network gradients.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from ..core import autodiff as ad
from ..core.autodiff import Dual3
from ..core.config import worker_count
from ..core.errors import ConfigurationError, DomainError
from .sample import KeypointSet, ShapeSample

logger = logging.getLogger(__name__)

# Distance reported for a part with no primitive in a shape
ABSENT_PART_DISTANCE = 10.0
SURFACE_TOLERANCE = 1e-9
NEAR_SURFACE_SIGMA = 0.05
DEFAULT_TAU = 0.2


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half: Tuple[float, float, float]
    part: int

    def __post_init__(self):
        if min(self.half) <= 0:
            raise DomainError(f"Box half-extents must be positive, got {self.half}")

    def sdf(self, p):
        """||max(|p|-h, 0)|| + min(max component of |p|-h, 0)"""
        q = ad.sub(ad.abs_(ad.sub(p, np.asarray(self.center))), np.asarray(self.half))
        outside = ad.norm(ad.maximum(q, 0.0), axis=-1)
        largest = ad.maximum(
            ad.maximum(ad.getitem(q, (Ellipsis, 0)), ad.getitem(q, (Ellipsis, 1))),
            ad.getitem(q, (Ellipsis, 2)),
        )
        return ad.add(outside, ad.minimum(largest, 0.0))


@dataclass(frozen=True)
class Capsule:
    a: Tuple[float, float, float]
    b: Tuple[float, float, float]
    radius: float
    part: int

    def __post_init__(self):
        if self.radius <= 0:
            raise DomainError(f"Capsule radius must be positive, got {self.radius}")

    def sdf(self, p):
        a, b = np.asarray(self.a), np.asarray(self.b)
        pa = ad.sub(p, a)
        ba = b - a
        length2 = float(ba @ ba)
        if length2 == 0.0:
            return ad.sub(ad.norm(pa, axis=-1), self.radius)
        h = ad.clip(ad.div(ad.dot(pa, ba), length2), 0.0, 1.0)
        column = ad.reshape(h, ad.value_of(h).shape + (1,))
        return ad.sub(ad.norm(ad.sub(pa, ad.mul(column, ba)), axis=-1), self.radius)


Primitive = Union[Box, Capsule]


@dataclass
class SynthSpec:
    """Primitive parts of one shape plus its named anchor points"""
    family: str
    n_parts: int
    primitives: List[Primitive]
    anchors: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_parts < 2:
            raise DomainError(f"A synthetic spec needs at least two parts, got {self.n_parts}")
        if not self.primitives:
            raise DomainError("A synthetic spec needs at least one primitive")
        for prim in self.primitives:
            if not 0 <= prim.part < self.n_parts:
                raise DomainError(f"Primitive part id {prim.part} outside [0, {self.n_parts})")

    def part_sdfs(self, p) -> List:
        """Per-part SDF (min over that part's primitives)"""
        parts = []
        for part in range(self.n_parts):
            members = [prim.sdf(p) for prim in self.primitives if prim.part == part]
            parts.append(reduce(ad.minimum, members) if members else None)
        return parts

    def sdf(self, p):
        return reduce(ad.minimum, [s for s in self.part_sdfs(p) if s is not None])

    def part_distances(self, points: np.ndarray) -> np.ndarray:
        """(N, k) per-part SDF values; absent parts report a large constant"""
        points = np.asarray(points, dtype=np.float64)
        columns = []
        for s in self.part_sdfs(points):
            if s is None:
                columns.append(np.full(len(points), ABSENT_PART_DISTANCE))
            else:
                columns.append(np.asarray(s))
        return np.stack(columns, axis=1)

    def sdf_and_gradient(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        out = self.sdf(Dual3.seed(np.asarray(points, dtype=np.float64)))
        return np.asarray(ad.value_of(out)), np.asarray(out.gradient())


def semantic_features(distances: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Soft one-hot features o_i = -(d_i - min_j d_j) / tau"""
    if tau <= 0:
        raise ConfigurationError(f"Feature temperature must be positive, got {tau}")
    return -(distances - distances.min(axis=1, keepdims=True)) / tau


def project_to_surface(spec: SynthSpec, points: np.ndarray, iterations: int = 12) -> np.ndarray:
    """Newton steps x <- x - s * grad s onto the zero level set"""
    x = np.array(points, dtype=np.float64)
    for _ in range(iterations):
        s, g = spec.sdf_and_gradient(x)
        x = x - s[:, None] * g
    return x


def sample_shape(
    spec: SynthSpec,
    n_surface: int,
    n_query: int,
    seed: Union[int, Tuple[int, ...]],
    tau: float = DEFAULT_TAU,
    name: str = "",
    max_rounds: int = 50,
) -> ShapeSample:
    """Deterministic surface/query sampling of an analytic spec"""
    rng = np.random.default_rng(seed)

    surface = np.zeros((0, 3))
    for _ in range(max_rounds):
        if len(surface) >= n_surface:
            break
        candidates = project_to_surface(spec, rng.uniform(-1.0, 1.0, size=(2 * n_surface, 3)))
        s, g = spec.sdf_and_gradient(candidates)
        ok = (
            (np.abs(s) <= SURFACE_TOLERANCE)
            & np.all(np.abs(candidates) <= 1.0, axis=1)
            & (np.linalg.norm(g, axis=1) > 0.5)
        )
        surface = np.concatenate([surface, candidates[ok]], axis=0)
    if len(surface) < n_surface:
        raise DomainError(
            f"Spec '{spec.family}' yielded {len(surface)} of {n_surface} surface points"
        )
    surface = surface[:n_surface]

    _, grad = spec.sdf_and_gradient(surface)
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    surface_dist = spec.part_distances(surface)

    n_near = n_query // 2
    anchors = surface[rng.integers(0, n_surface, size=n_near)]
    near = np.clip(anchors + rng.normal(0.0, NEAR_SURFACE_SIGMA, size=(n_near, 3)), -1.0, 1.0)
    uniform = rng.uniform(-1.0, 1.0, size=(n_query - n_near, 3))
    query = np.concatenate([near, uniform], axis=0)
    sdf, _ = spec.sdf_and_gradient(query)

    return ShapeSample(
        surface=surface,
        surface_features=semantic_features(surface_dist, tau),
        query=query,
        sdf=sdf,
        query_features=semantic_features(spec.part_distances(query), tau),
        normals=normals,
        labels=np.argmin(surface_dist, axis=1).astype(np.int64),
        keypoints=spec_keypoints(spec),
        name=name,
    )


def spec_keypoints(spec: SynthSpec) -> KeypointSet:
    """Anchor points projected onto the shape's surface"""
    if not spec.anchors:
        return KeypointSet()
    names = sorted(spec.anchors)
    points = project_to_surface(spec, np.array([spec.anchors[n] for n in names]))
    return KeypointSet(names, points)


# Families --------------------------------------------------------------------

def sphere_spec(rng: np.random.Generator) -> SynthSpec:
    """Two-lobe blob: a body sphere and a head sphere"""
    r0 = rng.uniform(0.4, 0.55)
    r1 = rng.uniform(0.2, 0.35)
    c0 = (0.0, -0.2, 0.0)
    c1 = (rng.uniform(-0.1, 0.1), -0.2 + r0 + 0.5 * r1, 0.0)
    anchors = {
        "body_bottom": (c0[0], c0[1] - r0, c0[2]),
        "body_front": (c0[0], c0[1], c0[2] + r0),
        "body_left": (c0[0] - r0, c0[1], c0[2]),
        "body_right": (c0[0] + r0, c0[1], c0[2]),
        "head_top": (c1[0], c1[1] + r1, c1[2]),
        "head_front": (c1[0], c1[1], c1[2] + r1),
    }
    return SynthSpec(
        family="sphere",
        n_parts=2,
        primitives=[Capsule(c0, c0, r0, 0), Capsule(c1, c1, r1, 1)],
        anchors=anchors,
        params={"r0": r0, "r1": r1},
    )


def chair_spec(rng: np.random.Generator, arms: Optional[bool] = None) -> SynthSpec:
    """Seat (0), back (1), four legs (2) and optional arms (3) resting just above the seat"""
    w = rng.uniform(0.35, 0.5)
    d = rng.uniform(0.3, 0.45)
    h = rng.uniform(-0.15, 0.1)
    t = 0.05
    bh = rng.uniform(0.25, 0.35)
    r = 0.04
    if arms is None:
        arms = bool(rng.uniform() < 0.5)

    seat_top = h + t
    primitives: List[Primitive] = [
        Box((0.0, h, 0.0), (w, t, d), 0),
        Box((0.0, seat_top + bh, -d + t), (w, bh, t), 1),
    ]
    anchors = {
        "seat_front_left": (-w, seat_top, d),
        "seat_front_right": (w, seat_top, d),
        "back_top_left": (-w, seat_top + 2 * bh, -d + t),
        "back_top_right": (w, seat_top + 2 * bh, -d + t),
    }
    for sx, sz, label in ((-1, 1, "front_left"), (1, 1, "front_right"),
                          (-1, -1, "back_left"), (1, -1, "back_right")):
        top = (sx * (w - r), h - t, sz * (d - r))
        foot = (sx * (w - r), -0.85, sz * (d - r))
        primitives.append(Capsule(top, foot, r, 2))
        anchors[f"leg_{label}_foot"] = (foot[0], foot[1] - r, foot[2])
    if arms:
        arm_y = seat_top + 0.15
        for sx, label in ((-1, "left"), (1, "right")):
            primitives.append(Box((sx * (w - 0.05), arm_y, 0.0), (0.05, 0.03, 0.8 * d), 3))
            primitives.append(Box((sx * (w - 0.05), seat_top + 0.06, 0.6 * d), (0.03, 0.06, 0.03), 3))
            anchors[f"arm_{label}_front"] = (sx * (w - 0.05), arm_y + 0.03, 0.8 * d)
    return SynthSpec(
        family="chair",
        n_parts=4,
        primitives=primitives,
        anchors=anchors,
        params={"width": w, "depth": d, "seat_height": h, "back_height": bh, "arms": float(arms)},
    )


def table_spec(rng: np.random.Generator) -> SynthSpec:
    """Top (0) and four legs (1)"""
    w = rng.uniform(0.5, 0.8)
    d = rng.uniform(0.35, 0.6)
    y = rng.uniform(0.1, 0.4)
    t = 0.05
    r = 0.05
    primitives: List[Primitive] = [Box((0.0, y, 0.0), (w, t, d), 0)]
    anchors = {}
    for sx, sz, label in ((-1, 1, "front_left"), (1, 1, "front_right"),
                          (-1, -1, "back_left"), (1, -1, "back_right")):
        anchors[f"top_{label}"] = (sx * w, y + t, sz * d)
        top = (sx * (w - 1.5 * r), y - t, sz * (d - 1.5 * r))
        foot = (top[0], -0.85, top[2])
        primitives.append(Capsule(top, foot, r, 1))
        anchors[f"leg_{label}_foot"] = (foot[0], foot[1] - r, foot[2])
    return SynthSpec(
        family="table",
        n_parts=2,
        primitives=primitives,
        anchors=anchors,
        params={"width": w, "depth": d, "height": y},
    )


FAMILIES: Dict[str, Callable[[np.random.Generator], SynthSpec]] = {
    "sphere": sphere_spec,
    "chair": chair_spec,
    "table": table_spec,
}


def family_spec(family: str, seed: int, index: int) -> SynthSpec:
    if family not in FAMILIES:
        raise ConfigurationError(f"Unknown shape family '{family}' (choose from {sorted(FAMILIES)})")
    return FAMILIES[family](np.random.default_rng([seed, index, 0]))


def generate_family(
    family: str,
    count: int,
    seed: int,
    n_surface: int = 2048,
    n_query: int = 2048,
    tau: float = DEFAULT_TAU,
) -> List[ShapeSample]:
    """Sample ``count`` shapes of a family; shape i depends only on (seed, i)"""
    if count < 1:
        raise ConfigurationError(f"Shape count must be positive, got {count}")

    def build(index: int) -> ShapeSample:
        spec = family_spec(family, seed, index)
        return sample_shape(
            spec, n_surface, n_query, seed=[seed, index, 1], tau=tau,
            name=f"{family}_{index:03d}",
        )

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        samples = list(pool.map(build, range(count)))
    logger.info(f"Generated {count} '{family}' shapes (seed {seed})")
    return samples
