import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from skimage import measure

from ..core.errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
GRID_CHUNK = 65536


@dataclass
class Mesh:
    """Triangle mesh; faces index into vertices"""
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DomainError("Mesh face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges"""
        pairs = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]], axis=0
        )
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        """V - E + F"""
        if self.is_empty:
            return 0
        return len(self.vertices) - len(self.edges()) + len(self.faces)

    def to_obj(self) -> str:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in self.faces]
        return "\n".join(lines) + ("\n" if lines else "")

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles"""
        if self.is_empty:
            raise DomainError("Cannot sample the surface of an empty mesh")
        areas = self.face_areas()
        tri = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        u, v = rng.uniform(size=(2, n))
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def grid_points(resolution: int) -> np.ndarray:
    """Vertices of the regular grid over [-1, 1]^3 in (i, j, k) order"""
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate_grid(field_fn: Callable[[np.ndarray], np.ndarray], resolution: int) -> np.ndarray:
    points = grid_points(resolution)
    values = np.concatenate([
        np.asarray(field_fn(points[i:i + GRID_CHUNK]), dtype=np.float64).reshape(-1)
        for i in range(0, len(points), GRID_CHUNK)
    ])
    return values.reshape(resolution, resolution, resolution)


def marching_cubes(
    field_fn: Callable[[np.ndarray], np.ndarray],
    resolution: int,
    iso: float = 0.0,
) -> Mesh:
    """Zero level set of a scalar field sampled on a resolution^3 grid over [-1, 1]^3"""
    if resolution < 2:
        raise ConfigurationError(f"Grid resolution must be at least 2, got {resolution}")
    volume = evaluate_grid(field_fn, resolution)
    if not np.all(np.isfinite(volume)):
        raise DomainError("Field is not finite on the extraction grid")
    if volume.min() > iso or volume.max() < iso or volume.min() == volume.max():
        logger.info("No sign change on the grid, returning an empty mesh")
        return Mesh()

    step = 2.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=iso, spacing=(step, step, step), allow_degenerate=False
    )
    mesh = Mesh(verts - 1.0, faces)
    if mesh.is_empty:
        return mesh
    mesh = Mesh(mesh.vertices, mesh.faces[mesh.face_areas() > DEGENERATE_AREA])

    # Drop vertices no face refers to
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = Mesh(mesh.vertices[used], remap[mesh.faces])
    logger.info(f"Extracted mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return mesh
