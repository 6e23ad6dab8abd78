"""
Loss terms on closed-form cases, analytic SDFs and parameter gradients.
"""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from semtemplate.core import autodiff as ad
from semtemplate.core.autodiff import Dual3, value_and_grad
from semtemplate.core.config import LossWeights
from semtemplate.core.errors import ConfigurationError, DomainError
from semtemplate.core.fields import FieldOutput, TemplateModel
from semtemplate.core.losses import (
    BatchItem,
    DeformedPartSets,
    _recon_terms,
    closed_form_r,
    closed_form_r_pooled,
    correction_loss,
    emb_loss,
    geo_loss,
    normal_loss,
    pdc_geo,
    pdc_sem,
    recon_loss,
    scale_loss,
    smooth_loss,
    total_loss,
    uncertainty,
)
from semtemplate.geometry.sample import ShapeSample
from semtemplate.geometry.synth import Box

WEIGHT_OF = {
    "pdc_geo": "gamma1", "scale": "gamma3", "geo": "gamma4", "smooth": "gamma5",
    "normal": "gamma6", "c": "gamma7", "emb": "gamma8",
}


def analytic_sample(surface, normals, query, sdf) -> ShapeSample:
    return ShapeSample(
        surface=surface,
        surface_features=np.zeros((len(surface), 2)),
        query=query,
        sdf=sdf,
        query_features=np.zeros((len(query), 2)),
        normals=normals,
    )


def analytic_terms(sdf_fn, sample: ShapeSample):
    def outputs(points):
        return FieldOutput(sdf=sdf_fn(Dual3.seed(points)), warped=None, delta_x=None, delta_s=None)

    terms = _recon_terms(outputs(sample.query), outputs(sample.surface), sample, delta=100.0)
    return {name: float(np.asarray(value)) for name, value in terms.items()}


def test_recon_terms_vanish_on_exact_sphere(rng):
    dirs = rng.normal(size=(64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    query = rng.uniform(-1, 1, size=(64, 3))
    sample = analytic_sample(0.5 * dirs, dirs, query, np.linalg.norm(query, axis=1) - 0.5)

    terms = analytic_terms(lambda p: ad.sub(ad.norm(p), 0.5), sample)

    assert terms["fit"] <= 1e-12
    assert terms["normal"] <= 1e-6
    assert terms["eikonal"] <= 1e-6
    assert 0.0 < terms["off_surface"] <= 1.0


def test_recon_loss_sums_the_terms(rng):
    dirs = rng.normal(size=(32, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    query = rng.uniform(-1, 1, size=(32, 3))
    sample = analytic_sample(0.5 * dirs, dirs, query, np.linalg.norm(query, axis=1) - 0.5)
    sphere = lambda p: ad.sub(ad.norm(p), 0.5)

    def field_fn(points, features):
        return FieldOutput(sdf=sphere(points), warped=None, delta_x=None, delta_s=None)

    total = float(np.asarray(recon_loss(sample, field_fn)))

    assert total == pytest.approx(sum(analytic_terms(sphere, sample).values()), abs=1e-9)
    sample.normals = None
    with pytest.raises(ConfigurationError):
        recon_loss(sample, field_fn)


def test_normal_loss_against_sphere_template(rng):
    dirs = rng.normal(size=(16, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    template = lambda u: ad.sub(ad.norm(u), 0.5)

    assert float(np.asarray(normal_loss(0.5 * dirs, dirs, template))) == pytest.approx(0.0, abs=1e-9)
    assert float(np.asarray(normal_loss(0.5 * dirs, -dirs, template))) == pytest.approx(2.0)


def test_recon_terms_vanish_on_exact_box(rng):
    box = Box((0.0, 0.0, 0.0), (0.3, 0.2, 0.4), 0)
    n = 32
    face = np.column_stack([
        np.full(n, 0.3), rng.uniform(-0.15, 0.15, n), rng.uniform(-0.35, 0.35, n)
    ])
    normals = np.tile([1.0, 0.0, 0.0], (n, 1))
    query = rng.uniform(-1, 1, size=(64, 3))
    sample = analytic_sample(face, normals, query, np.asarray(box.sdf(query)))

    terms = analytic_terms(box.sdf, sample)

    assert terms["fit"] <= 1e-12
    assert terms["normal"] <= 1e-6
    assert terms["eikonal"] <= 1e-6


def test_closed_form_scale_is_least_squares_optimum(rng):
    x = rng.normal(size=(40, 3))
    dx = 0.3 * x + 0.05 * rng.normal(size=(40, 3))

    r = float(closed_form_r(x, dx))

    residual = x + dx - r * x
    assert abs(float((x * residual).sum())) <= 1e-9 * float((x * x).sum())
    objective = lambda s: float(((x + dx - s * x) ** 2).sum())
    golden = minimize_scalar(objective, method="golden").x
    assert r == pytest.approx(golden, abs=1e-6)


def test_closed_form_scale_examples(rng):
    x = rng.normal(size=(10, 3))
    assert float(closed_form_r(x, np.zeros_like(x))) == pytest.approx(1.0)
    assert float(closed_form_r(x, 0.5 * x)) == pytest.approx(1.5)
    with pytest.raises(DomainError):
        closed_form_r(np.zeros((4, 3)), np.ones((4, 3)))


def test_scale_loss_modes(rng):
    x1 = rng.normal(size=(8, 3))
    x2 = 2.0 * x1
    pairs = [(x1, np.zeros_like(x1)), (x2, x2)]

    assert float(scale_loss(pairs, "per_shape")) == pytest.approx(0.5)
    assert float(scale_loss(pairs, "pooled")) == pytest.approx(0.8)
    assert float(closed_form_r_pooled(pairs)) == pytest.approx(1.8)
    with pytest.raises(ConfigurationError):
        scale_loss(pairs, "median")
    with pytest.raises(DomainError):
        scale_loss([])


def test_pairwise_distances_are_symmetric(rng):
    for _ in range(10):
        P = rng.normal(size=(rng.integers(1, 40), 3))
        Q = rng.normal(size=(rng.integers(1, 40), 3))
        fp, fq = rng.normal(size=(len(P), 2)), rng.normal(size=(len(Q), 2))
        parts_p = DeformedPartSets.from_features(P, fp, 2)
        parts_q = DeformedPartSets.from_features(Q, fq, 2)

        assert float(geo_loss(P, Q)) == pytest.approx(float(geo_loss(Q, P)), abs=1e-12)
        assert float(pdc_geo(parts_p, parts_q)) == pytest.approx(float(pdc_geo(parts_q, parts_p)), abs=1e-12)


def test_scale_loss_ignores_shape_order(rng):
    pairs = [(rng.normal(size=(6, 3)), 0.2 * rng.normal(size=(6, 3))) for _ in range(5)]
    shuffled = [pairs[i] for i in rng.permutation(5)]
    for mode in ("per_shape", "pooled"):
        assert float(scale_loss(shuffled, mode)) == pytest.approx(float(scale_loss(pairs, mode)), abs=1e-12)


def test_part_sets_group_by_argmax():
    points = np.arange(12.0).reshape(4, 3)
    features = np.array([[0.0, -1.0], [-1.0, 0.0], [0.0, -2.0], [0.0, 0.0]])

    parts = DeformedPartSets.from_features(points, features)

    np.testing.assert_array_equal(parts.points[0], points[[0, 2, 3]])
    np.testing.assert_array_equal(parts.points[1], points[[1]])


def test_pdc_geo_single_points():
    p = DeformedPartSets([np.zeros((1, 3)), np.ones((1, 3))], [np.zeros((1, 2))] * 2)
    q = DeformedPartSets([np.array([[0.1, 0.0, 0.0]]), np.ones((1, 3))], [np.zeros((1, 2))] * 2)
    q_missing = DeformedPartSets([np.array([[0.1, 0.0, 0.0]]), np.zeros((0, 3))], [np.zeros((1, 2)), np.zeros((0, 2))])

    assert float(pdc_geo(p, q)) == pytest.approx(0.02)
    assert float(pdc_geo(p, q_missing)) == pytest.approx(0.02)
    assert float(pdc_geo(p, p)) == 0.0


def test_pdc_geo_part_count_mismatch():
    p = DeformedPartSets([np.zeros((1, 3))] * 2, [np.zeros((1, 2))] * 2)
    q = DeformedPartSets([np.zeros((1, 3))] * 3, [np.zeros((1, 3))] * 3)
    with pytest.raises(ConfigurationError):
        pdc_geo(p, q)


def test_pdc_sem_feature_gap():
    pts = [np.zeros((1, 3)), np.ones((1, 3))]
    p = DeformedPartSets(pts, [np.array([[0.0, -1.0]]), np.array([[-1.0, 0.0]])])
    q = DeformedPartSets(pts, [np.array([[0.0, -3.0]]), np.array([[-1.0, 0.0]])])

    assert pdc_sem(p, p) == 0.0
    assert pdc_sem(p, q) == pytest.approx(8.0)


def test_emb_loss_reductions():
    codes, priors = np.ones((2, 3)), np.ones((2, 2))
    assert float(emb_loss(codes, priors, "sum")) == pytest.approx(10.0)
    assert float(emb_loss(codes, priors, "mean")) == pytest.approx(1.0)
    assert float(emb_loss(np.array([[3.0, 4.0, 0.0]]), np.zeros((1, 2)))) == pytest.approx(25.0)
    with pytest.raises(ConfigurationError):
        emb_loss(codes, priors, "max")


def test_geo_loss_single_points():
    assert float(geo_loss(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))) == pytest.approx(2.0)


def test_correction_and_smooth_losses(rng):
    assert float(correction_loss(np.array([1.0, -3.0]))) == pytest.approx(2.0)

    W = rng.normal(size=(3, 3))
    delta = Dual3.seed(rng.normal(size=(7, 3))) @ W
    assert float(np.asarray(smooth_loss(delta))) == pytest.approx(float((W * W).sum()))


def test_uncertainty_range(rng):
    p = rng.normal(size=(5, 3))
    zero = np.zeros_like(p)
    np.testing.assert_allclose(uncertainty(p, zero, p, zero, gamma=10.0), 0.0)
    np.testing.assert_allclose(uncertainty(p, zero, p + 1.0, zero, gamma=0.0), 0.0)
    far = uncertainty(p, zero, p + 10.0, zero, gamma=10.0)
    assert np.all((far > 0.99) & (far <= 1.0))
    half = uncertainty(np.zeros((1, 3)), np.zeros((1, 3)), np.array([[np.sqrt(np.log(2.0)), 0, 0]]),
                       np.zeros((1, 3)), gamma=1.0)
    np.testing.assert_allclose(half, [0.5])


# Batch objective -----------------------------------------------------------

@pytest.fixture
def pair_batch(spheres, rng):
    return [BatchItem(i, spheres[i].subsample(rng, 12, 12)) for i in range(2)]


@pytest.fixture
def pair_model(tiny_field):
    return TemplateModel(tiny_field, n_parts=2, n_shapes=2)


def test_total_loss_guards(pair_model, pair_batch):
    params = pair_model.init_params(0)
    with pytest.raises(DomainError):
        total_loss(pair_model, params, [], LossWeights())
    with pytest.raises(ConfigurationError):
        total_loss(pair_model, params, pair_batch[:1], LossWeights())
    _, breakdown = total_loss(pair_model, params, pair_batch[:1], LossWeights(), terms=["rec"])
    assert breakdown.total == pytest.approx(breakdown.terms["rec"])


def test_total_is_weighted_sum_of_breakdown(pair_model, pair_batch):
    weights = LossWeights(gamma2=0.0)
    _, breakdown = total_loss(pair_model, pair_model.init_params(0), pair_batch, weights)

    assert breakdown.terms["pdc_sem"] == 0.0
    expected = breakdown.terms["rec"] + sum(
        getattr(weights, WEIGHT_OF[name]) * breakdown.terms[name] for name in WEIGHT_OF
    )
    assert breakdown.total == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("term", ["rec", "pdc_geo", "scale", "geo", "smooth", "normal", "c", "emb"])
def test_term_gradients_match_finite_differences(pair_model, pair_batch, term):
    params = pair_model.init_params(0)
    weights = LossWeights()
    loss_fn = lambda leaves: total_loss(pair_model, leaves, pair_batch, weights, terms=[term])

    loss, grad, _ = value_and_grad(loss_fn, params)

    picks = np.random.default_rng(7).choice(params.layout.size, size=12, replace=False)
    for block in ("latent", "priors", "template.W1"):
        picks = np.append(picks, params.layout[block].offset)
    h = 1e-6
    for i in picks:
        up, down = params.copy(), params.copy()
        up.data[i] += h
        down.data[i] -= h
        fd = (value_and_grad(loss_fn, up)[0] - value_and_grad(loss_fn, down)[0]) / (2 * h)
        assert grad.data[i] == pytest.approx(fd, rel=1e-5, abs=1e-7 * max(1.0, abs(loss)))


def test_semantic_consistency_has_no_parameter_gradient(pair_model, pair_batch):
    params = pair_model.init_params(0)
    loss, grad, _ = value_and_grad(
        lambda leaves: total_loss(pair_model, leaves, pair_batch, LossWeights(), terms=["pdc_sem"]),
        params,
    )
    assert loss >= 0.0
    assert not np.any(grad.data)


def test_consistency_terms_pair_deformed_surface_points(pair_model, pair_batch, still_params):
    params = still_params(pair_model, pair_model.init_params(0))
    a, b = (item.sample for item in pair_batch)

    _, breakdown = total_loss(pair_model, params, pair_batch, LossWeights(), terms=["pdc_geo", "geo"])

    parts_a = DeformedPartSets.from_features(a.surface, a.surface_features, 2)
    parts_b = DeformedPartSets.from_features(b.surface, b.surface_features, 2)
    assert breakdown.terms["geo"] == pytest.approx(float(geo_loss(a.surface, b.surface)), rel=1e-12)
    assert breakdown.terms["pdc_geo"] == pytest.approx(float(pdc_geo(parts_a, parts_b)), rel=1e-12)
    assert breakdown.terms["geo"] != pytest.approx(float(geo_loss(a.query, b.query)), rel=1e-6)
