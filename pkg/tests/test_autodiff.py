"""
Tape gradients against central differences, spatial duals and parameter vectors.
"""

import numpy as np
import pytest

from semtemplate.core import autodiff as ad
from semtemplate.core.autodiff import Dual3, ParamLayout, ParamVector, Tape, value_and_grad
from semtemplate.core.errors import ConfigurationError, UnsupportedPrimitiveError
from semtemplate.core.fields import MLPSpec


def central_differences(loss_fn, params: ParamVector, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros(params.layout.size)
    for i in range(params.layout.size):
        up, down = params.copy(), params.copy()
        up.data[i] += h
        down.data[i] -= h
        grad[i] = (value_and_grad(loss_fn, up)[0] - value_and_grad(loss_fn, down)[0]) / (2 * h)
    return grad


def test_quadratic_gradient():
    layout = ParamLayout([("w", (3,))])
    params = ParamVector(layout, np.array([1.0, -2.0, 0.5]))

    loss, grad, _ = value_and_grad(lambda p: ad.sum_(ad.mul(p["w"], p["w"])), params)

    assert loss == pytest.approx(5.25)
    np.testing.assert_allclose(grad.block("w"), 2 * params.block("w"))


def test_sine_layer_matches_finite_differences(rng):
    layout = ParamLayout([("W", (3, 4)), ("b", (4,))])
    params = ParamVector(layout, rng.normal(size=layout.size))
    x = rng.normal(size=(5, 3))

    def loss_fn(p):
        h = ad.sin(ad.add(ad.matmul(x, p["W"]), p["b"]))
        return ad.mean(ad.mul(h, h))

    _, grad, _ = value_and_grad(loss_fn, params)
    np.testing.assert_allclose(grad.data, central_differences(loss_fn, params), rtol=1e-5, atol=1e-8)


def test_gradient_through_spatial_derivative(rng):
    """Reverse mode over forward-mode spatial gradients (Eikonal-style terms)"""
    layout = ParamLayout([("W", (3, 4))])
    params = ParamVector(layout, rng.normal(size=layout.size))
    x = rng.normal(size=(5, 3))

    def loss_fn(p):
        out = ad.sum_(ad.sin(ad.matmul(Dual3.seed(x), p["W"])), axis=-1)
        g = out.gradient()
        return ad.mean(ad.mul(g, g))

    _, grad, _ = value_and_grad(loss_fn, params)
    np.testing.assert_allclose(grad.data, central_differences(loss_fn, params), rtol=1e-5, atol=1e-8)


def test_aux_passes_through():
    params = ParamVector(ParamLayout([("w", (2,))]), np.ones(2))
    loss, _, aux = value_and_grad(lambda p: (ad.sum_(p["w"]), "breakdown"), params)
    assert loss == 2.0
    assert aux == "breakdown"


def test_repeated_indices_accumulate():
    params = ParamVector(ParamLayout([("x", (3,))]), np.array([1.0, 2.0, 3.0]))
    _, grad, _ = value_and_grad(lambda p: ad.sum_(ad.getitem(p["x"], np.array([0, 0, 2]))), params)
    np.testing.assert_array_equal(grad.block("x"), [2.0, 0.0, 1.0])


def test_maximum_tie_goes_to_first_argument():
    layout = ParamLayout([("a", ()), ("b", ())])
    params = ParamVector(layout, np.array([1.0, 1.0]))
    _, grad, _ = value_and_grad(lambda p: ad.maximum(p["a"], p["b"]), params)
    np.testing.assert_array_equal(grad.data, [1.0, 0.0])


def test_unsupported_ufunc_raises():
    v = Tape().leaf(np.ones(3))
    with pytest.raises(UnsupportedPrimitiveError):
        np.log(v)


def test_numpy_operators_record_on_tape():
    params = ParamVector(ParamLayout([("x", (2,))]), np.array([0.3, -0.7]))
    _, grad, _ = value_and_grad(lambda p: ad.sum_(np.sin(p["x"]) * 2.0), params)
    np.testing.assert_allclose(grad.block("x"), 2.0 * np.cos([0.3, -0.7]))


def test_dual_norm_gradient(rng):
    x = rng.normal(size=(6, 3))
    c = np.array([0.1, -0.2, 0.3])

    d = ad.norm(ad.sub(Dual3.seed(x), c), axis=-1)
    dist = np.linalg.norm(x - c, axis=1)

    np.testing.assert_allclose(ad.value_of(d), dist)
    np.testing.assert_allclose(d.gradient(), (x - c) / dist[:, None])


def test_dual_broadcast_jacobian(rng):
    x = rng.normal(size=(4, 3))
    scale = np.array([1.0, 2.0, 3.0])

    out = ad.mul(Dual3.seed(x)[:, 0:1], scale)
    expected = np.zeros((4, 3, 3))
    expected[:, :, 0] = scale

    np.testing.assert_allclose(ad.value_of(out), x[:, :1] * scale)
    np.testing.assert_allclose(out.jacobian(), expected)


def test_dual_requires_three_coordinates():
    with pytest.raises(ConfigurationError):
        Dual3.seed(np.zeros((4, 2)))


def test_param_vector_pack_unpack():
    layout = ParamLayout([("W", (2, 3)), ("b", (3,))])
    blocks = {"W": np.arange(6.0).reshape(2, 3), "b": np.array([7.0, 8.0, 9.0])}

    params = ParamVector.pack(layout, blocks)

    np.testing.assert_array_equal(params.data, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0, 9.0])
    for name, value in params.unpack().items():
        np.testing.assert_array_equal(value, blocks[name])


def test_param_vector_checksum_tracks_values():
    layout = ParamLayout([("w", (4,))])
    params = ParamVector(layout, np.arange(4.0))
    other = params.copy()
    assert params.checksum() == other.checksum()
    other.data[0] = 1e-12
    assert params.checksum() != other.checksum()


def test_param_layout_errors():
    with pytest.raises(ConfigurationError):
        ParamLayout([("w", (2,)), ("w", (3,))])
    with pytest.raises(ConfigurationError):
        ParamVector(ParamLayout([("w", (2,))]), np.zeros(3))
    with pytest.raises(ConfigurationError):
        ParamVector.pack(ParamLayout([("w", (2,))]), {"w": np.zeros(3)})


def test_grad_params_of_spatial_derivative():
    layout = ParamLayout([("w", ())])
    params = ParamVector(layout, np.array([1.5]))

    def loss_fn(p):
        x = Dual3.seed(np.zeros((1, 3)))
        slope = ad.getitem(ad.sin(ad.mul(ad.getitem(x, (slice(None), 0)), p["w"])).gradient(), (0, 0))
        return ad.mul(slope, slope)

    # d/dx sin(w x) at 0 is w, so the loss is w^2
    np.testing.assert_allclose(ad.grad_params(loss_fn, params).block("w"), 3.0)


def test_forward_dual_identity_net():
    net = MLPSpec([3, 3], prefix="id")
    x = np.array([[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]])

    out = ad.forward_dual(net, {"id.W0": np.eye(3), "id.b0": np.zeros(3)}, x)

    np.testing.assert_array_equal(out.value, x)
    np.testing.assert_array_equal(out.jacobian(), np.broadcast_to(np.eye(3), (2, 3, 3)))


def test_forward_dual_matches_finite_differences(rng):
    net = MLPSpec([3, 4, 2], omega0=2.0, prefix="mlp")
    weights = net.init_weights(rng)
    x = rng.normal(size=(5, 3))
    plain = lambda pts: net.forward(net.unpack_weights(weights), pts)

    out = ad.forward_dual(net, weights, x)

    np.testing.assert_allclose(out.value, plain(x), atol=1e-12)
    h = 1e-6
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        fd = (plain(x + step) - plain(x - step)) / (2 * h)
        np.testing.assert_allclose(out.jacobian()[:, :, k], fd, atol=1e-6)


def test_gradient_is_linear_in_the_loss(rng):
    layout = ParamLayout([("w", (4,)), ("b", (2,))])
    params = ParamVector(layout, rng.normal(size=layout.size))
    x = rng.normal(size=(5, 4))

    def first(p):
        return ad.sum_(ad.sin(ad.matmul(x, ad.reshape(p["w"], (4, 1)))))

    def second(p):
        return ad.mean(ad.mul(ad.exp(p["b"]), ad.sum_(p["w"])))

    a, b = 0.75, -2.5
    combined = ad.grad_params(lambda p: ad.add(ad.mul(first(p), a), ad.mul(second(p), b)), params)
    expected = a * ad.grad_params(first, params).data + b * ad.grad_params(second, params).data

    np.testing.assert_allclose(combined.data, expected, rtol=1e-12, atol=1e-14)
