"""
Training objective: reconstruction, deformation consistency and regularisers.

Every term works on plain arrays and on tape variables; terms that need spatial
derivatives take ``Dual3`` field outputs. ``total_loss`` combines the registered
terms for a batch of shapes and reports the unweighted breakdown.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Dual3
from .config import LossWeights
from .errors import ConfigurationError, DomainError
from .fields import FieldOutput, TemplateModel, field_eval, template_eval
from .registry import loss_terms
from ..geometry.sample import ShapeSample
from ..geometry.spatial import SpatialIndex, chamfer, match, squared_distances

logger = logging.getLogger(__name__)

__all__ = [
    "match", "DeformedPartSets", "pdc_geo", "pdc_sem", "closed_form_r",
    "closed_form_r_pooled", "scale_loss", "geo_loss", "recon_loss", "smooth_loss",
    "normal_loss", "correction_loss", "emb_loss", "uncertainty", "total_loss",
    "BatchItem", "ShapeEval", "LossBreakdown",
]


@dataclass
class DeformedPartSets:
    """Deformed sample points grouped by the argmax part of their source feature"""
    points: List[Any]
    features: List[np.ndarray]

    @classmethod
    def from_features(cls, deformed, features: np.ndarray, n_parts: Optional[int] = None) -> "DeformedPartSets":
        features = np.asarray(features, dtype=np.float64)
        k = n_parts or features.shape[1]
        labels = np.argmax(features, axis=1)
        points, feats = [], []
        for part in range(k):
            idx = np.nonzero(labels == part)[0]
            points.append(ad.getitem(deformed, idx))
            feats.append(features[idx])
        return cls(points, feats)

    @property
    def n_parts(self) -> int:
        return len(self.points)

    def size(self, part: int) -> int:
        return len(ad.value_of(self.points[part]))


def _shared_parts(parts_p: DeformedPartSets, parts_q: DeformedPartSets) -> List[int]:
    if parts_p.n_parts != parts_q.n_parts:
        raise ConfigurationError(
            f"Part sets disagree on k: {parts_p.n_parts} vs {parts_q.n_parts}"
        )
    shared = []
    for part in range(parts_p.n_parts):
        if parts_p.size(part) == 0 or parts_q.size(part) == 0:
            logger.debug(f"Skipping part {part}: empty on one side")
            continue
        shared.append(part)
    return shared


def pdc_geo(parts_p: DeformedPartSets, parts_q: DeformedPartSets):
    """Part-wise symmetric mean squared nearest-neighbour distance, summed over parts"""
    total = 0.0
    for part in _shared_parts(parts_p, parts_q):
        total = ad.add(total, chamfer(parts_p.points[part], parts_q.points[part]))
    return total


def _directed_feature_gap(points_a, feats_a, points_b, feats_b) -> float:
    idx, _ = SpatialIndex(ad.value_of(points_b)).nearest(ad.value_of(points_a))
    return float(squared_distances(feats_a, feats_b[idx]).mean())


def pdc_sem(parts_p: DeformedPartSets, parts_q: DeformedPartSets) -> float:
    """
    Part-wise symmetric mean squared feature gap between nearest deformed points.

    Features are carried from the source points, so the value has no parameter
    gradient; matching still follows the deformed positions.
    """
    total = 0.0
    for part in _shared_parts(parts_p, parts_q):
        p, q = parts_p.points[part], parts_q.points[part]
        fp, fq = parts_p.features[part], parts_q.features[part]
        total += _directed_feature_gap(p, fp, q, fq) + _directed_feature_gap(q, fq, p, fp)
    return total


def closed_form_r(x, delta_x):
    """Global scale r minimising sum ||x + dx - r x||^2"""
    x = np.asarray(ad.value_of(x), dtype=np.float64)
    denom = float((x * x).sum())
    if denom <= 0.0:
        raise DomainError("Scale factor undefined: every point is at the origin")
    return ad.div(ad.sum_(ad.mul(x, ad.add(x, delta_x))), denom)


def closed_form_r_pooled(pairs: Sequence[Tuple[Any, Any]]):
    """One scale factor over every (x, dx) pair of a batch"""
    denom = sum(float((np.asarray(ad.value_of(x)) ** 2).sum()) for x, _ in pairs)
    if denom <= 0.0:
        raise DomainError("Scale factor undefined: every point is at the origin")
    numer = 0.0
    for x, delta_x in pairs:
        x = np.asarray(ad.value_of(x), dtype=np.float64)
        numer = ad.add(numer, ad.sum_(ad.mul(x, ad.add(x, delta_x))))
    return ad.div(numer, denom)


def scale_loss(pairs: Sequence[Tuple[Any, Any]], mode: str = "per_shape"):
    """|E[r] - 1| with per-shape r averaged, or one pooled r"""
    if not pairs:
        raise DomainError("Scale loss needs at least one shape")
    if mode == "pooled":
        r = closed_form_r_pooled(pairs)
    elif mode == "per_shape":
        r = 0.0
        for x, delta_x in pairs:
            r = ad.add(r, closed_form_r(x, delta_x))
        r = ad.div(r, float(len(pairs)))
    else:
        raise ConfigurationError(f"Unknown scale mode '{mode}'")
    return ad.abs_(ad.sub(r, 1.0))


def geo_loss(p_deformed, q_deformed):
    """Chamfer distance between two deformed shapes"""
    return chamfer(p_deformed, q_deformed)


def _recon_terms(
    query_out: FieldOutput,
    surface_out: FieldOutput,
    sample: ShapeSample,
    delta: float,
) -> Dict[str, Any]:
    normals = sample.require_normals()
    sdf_q = query_out.sdf.value
    sdf_s = surface_out.sdf.value
    # Surface points have ground-truth SDF 0
    fit = ad.mean(ad.abs_(ad.concat([ad.sub(sdf_q, sample.sdf), sdf_s], axis=0)))
    grad_s = surface_out.sdf.gradient()
    normal = ad.mean(ad.sub(1.0, ad.dot(grad_s, normals)))
    eikonal = ad.mean(ad.abs_(ad.sub(ad.norm(query_out.sdf.gradient()), 1.0)))
    off_surface = ad.mean(ad.exp(ad.mul(ad.abs_(sdf_q), -delta)))
    return {"fit": fit, "normal": normal, "eikonal": eikonal, "off_surface": off_surface}


def recon_loss(sample: ShapeSample, field_fn, delta: float = 100.0):
    """
    Sum of four averaged terms: |F - s| over query and surface points, normal
    alignment on the surface, Eikonal deviation and the off-surface penalty.

    ``field_fn(points, features)`` must return a FieldOutput whose ``sdf`` is a Dual3.
    """
    sample.require_normals()
    query_out = field_fn(Dual3.seed(sample.query), sample.query_features)
    surface_out = field_fn(Dual3.seed(sample.surface), sample.surface_features)
    terms = _recon_terms(query_out, surface_out, sample, delta)
    return ad.add(ad.add(terms["fit"], terms["normal"]), ad.add(terms["eikonal"], terms["off_surface"]))


def smooth_loss(delta_x: Dual3):
    """Mean squared Frobenius norm of the spatial Jacobian of dx"""
    dx = delta_x.dx
    return ad.mean(ad.sum_(ad.mul(dx, dx), axis=(0, 2)))


def normal_loss(warped, normals: np.ndarray, template_fn):
    """Mean of 1 - <grad T(x + dx), n> with the gradient taken in template space"""
    grad = template_fn(Dual3.seed(warped)).gradient()
    return ad.mean(ad.sub(1.0, ad.dot(grad, np.asarray(normals, dtype=np.float64))))


def correction_loss(delta_s):
    """Mean |ds|"""
    return ad.mean(ad.abs_(delta_s))


def emb_loss(codes, priors, reduction: str = "sum"):
    """Squared l2 norms of latent codes and part priors (summed, or averaged per entry)"""
    total = ad.add(ad.sum_(ad.mul(codes, codes)), ad.sum_(ad.mul(priors, priors)))
    if reduction == "sum":
        return total
    if reduction == "mean":
        count = np.size(ad.value_of(codes)) + np.size(ad.value_of(priors))
        return ad.div(total, float(count))
    raise ConfigurationError(f"Unknown embedding reduction '{reduction}'")


def uncertainty(p, delta_p, q, delta_q, gamma: float) -> np.ndarray:
    """1 - exp(-gamma ||(p + dp) - (q + dq)||^2)"""
    gap = squared_distances(
        np.asarray(p) + np.asarray(delta_p), np.asarray(q) + np.asarray(delta_q)
    )
    return 1.0 - np.exp(-gamma * gap)


# Batch objective -----------------------------------------------------------

@dataclass
class BatchItem:
    """A (subsampled) training shape and its row in the latent table"""
    index: int
    sample: ShapeSample


class ShapeEval:
    """Lazily evaluated field outputs of one shape, shared by all terms"""

    def __init__(self, model: TemplateModel, params: Mapping[str, Any], z, sample: ShapeSample, weights: LossWeights):
        self.model = model
        self.params = params
        self.z = z
        self.sample = sample
        self.weights = weights
        self.ctx = model.context(params, z, lambda x: sample.feature_fn()(x))

    @cached_property
    def query_out(self) -> FieldOutput:
        return field_eval(Dual3.seed(self.sample.query), self.ctx, self.sample.query_features)

    @cached_property
    def surface_out(self) -> FieldOutput:
        return field_eval(Dual3.seed(self.sample.surface), self.ctx, self.sample.surface_features)

    @property
    def deformed_surface(self):
        return self.surface_out.warped.value

    @property
    def query_delta(self):
        return self.query_out.delta_x.value

    @cached_property
    def parts(self) -> DeformedPartSets:
        return DeformedPartSets.from_features(
            self.deformed_surface, self.sample.surface_features, self.model.n_parts
        )

    def template_fn(self, u):
        return template_eval(u, self.params, self.model)


@loss_terms.term("rec", description="reconstruction")
def _rec_term(shape: ShapeEval):
    terms = _recon_terms(shape.query_out, shape.surface_out, shape.sample, shape.weights.delta)
    return ad.add(ad.add(terms["fit"], terms["normal"]), ad.add(terms["eikonal"], terms["off_surface"]))


@loss_terms.term("pdc_geo", weight="gamma1", pairwise=True)
def _pdc_geo_term(a: ShapeEval, b: ShapeEval):
    return pdc_geo(a.parts, b.parts)


@loss_terms.term("pdc_sem", weight="gamma2", pairwise=True)
def _pdc_sem_term(a: ShapeEval, b: ShapeEval):
    return pdc_sem(a.parts, b.parts)


@loss_terms.term("scale", weight="gamma3", batch=True)
def _scale_term(shapes: Sequence[ShapeEval], params):
    pairs = [(s.sample.query, s.query_delta) for s in shapes]
    return scale_loss(pairs, shapes[0].weights.scale_mode)


@loss_terms.term("geo", weight="gamma4", pairwise=True)
def _geo_term(a: ShapeEval, b: ShapeEval):
    return geo_loss(a.deformed_surface, b.deformed_surface)


@loss_terms.term("smooth", weight="gamma5")
def _smooth_term(shape: ShapeEval):
    return smooth_loss(shape.query_out.delta_x)


@loss_terms.term("normal", weight="gamma6")
def _normal_term(shape: ShapeEval):
    return normal_loss(shape.surface_out.warped.value, shape.sample.require_normals(), shape.template_fn)


@loss_terms.term("c", weight="gamma7")
def _correction_term(shape: ShapeEval):
    return correction_loss(shape.query_out.delta_s.value)


@loss_terms.term("emb", weight="gamma8", batch=True)
def _emb_term(shapes: Sequence[ShapeEval], params):
    codes = ad.concat([ad.reshape(s.z, (1, -1)) for s in shapes], axis=0)
    return emb_loss(codes, shapes[0].model.priors(params), shapes[0].weights.emb_reduction)


@dataclass
class LossBreakdown:
    """Unweighted term values of one evaluation"""
    total: float
    terms: Dict[str, float] = field(default_factory=dict)
    r_mean: float = 1.0

    def as_dict(self) -> Dict[str, float]:
        return {"total": self.total, **self.terms, "r_mean": self.r_mean}

    def __str__(self) -> str:
        parts = " ".join(f"{name}={value:.6g}" for name, value in self.terms.items())
        return f"total={self.total:.6g} {parts} r_mean={self.r_mean:.6g}"


def _coefficient(weights: LossWeights, name: Optional[str]) -> float:
    return 1.0 if name is None else float(getattr(weights, name))


def _r_mean(shapes: Sequence[ShapeEval]) -> float:
    values = []
    for shape in shapes:
        x = shape.sample.query
        denom = float((x * x).sum())
        if denom > 0:
            moved = x + np.asarray(ad.value_of(shape.query_delta))
            values.append(float((x * moved).sum()) / denom)
    return float(np.mean(values)) if values else 1.0


def total_loss(
    model: TemplateModel,
    params: Mapping[str, Any],
    batch: Sequence[BatchItem],
    weights: LossWeights,
    latents: Optional[Mapping[int, Any]] = None,
    terms: Optional[Sequence[str]] = None,
):
    """
    Weighted objective over a batch; returns (loss, LossBreakdown).

    Shapes are paired in batch order, (0, 1), (2, 3), ...; an odd last shape has no
    partner. Terms with zero weight are not evaluated.
    """
    if not batch:
        raise DomainError("Cannot evaluate the loss of an empty batch")
    names = list(terms) if terms is not None else loss_terms.names()
    active = [
        name for name in names
        if _coefficient(weights, loss_terms.metadata(name)["weight"]) > 0
    ]
    if len(batch) < 2 and any(loss_terms.metadata(n)["scope"] == "pair" for n in active):
        raise ConfigurationError("Pairwise loss terms need a batch of at least two shapes")

    shapes = []
    for item in batch:
        z = latents[item.index] if latents and item.index in latents else model.latent(params, item.index)
        shapes.append(ShapeEval(model, params, z, item.sample, weights))
    pairs = [(shapes[i], shapes[i + 1]) for i in range(0, len(shapes) - 1, 2)]

    total = 0.0
    breakdown: Dict[str, float] = {name: 0.0 for name in names}
    for name in active:
        func = loss_terms.get(name)
        meta = loss_terms.metadata(name)
        if meta["scope"] == "shape":
            value = ad.div(_sum(func(s) for s in shapes), float(len(shapes)))
        elif meta["scope"] == "pair":
            value = ad.div(_sum(func(a, b) for a, b in pairs), float(len(pairs)))
        else:
            value = func(shapes, params)
        breakdown[name] = float(np.asarray(ad.value_of(value)))
        total = ad.add(total, ad.mul(value, _coefficient(weights, meta["weight"])))

    result = LossBreakdown(
        total=float(np.asarray(ad.value_of(total))),
        terms=breakdown,
        r_mean=_r_mean(shapes),
    )
    return total, result


def _sum(values):
    total = 0.0
    for value in values:
        total = ad.add(total, value)
    return total
