"""
Neural fields: the shared template SDF, the hypernetwork-conditioned deformation
field and the semantic-aware deformation code (SDC) that feeds it.

A shape is evaluated as ``F(x) = T(x + dx) + ds`` where ``(dx, ds) = D(x, sdc(o(x)))``
and the weights of ``D`` are generated from the shape's latent code ``z``.
Every function accepts plain arrays, tape variables or ``Dual3`` inputs, so the same
code serves inference, training and spatial derivatives.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamLayout, ParamVector
from .config import FieldConfig
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

Weights = List[Tuple[Any, Any]]


def _param_blocks(params: Union[ParamVector, Mapping[str, Any]]) -> Mapping[str, Any]:
    if isinstance(params, ParamVector):
        return {block.name: params.block(block.name) for block in params.layout}
    return params


class MLPSpec:
    """Fully connected net: sine (or ReLU) hidden layers, linear last layer"""

    def __init__(
        self,
        widths: Sequence[int],
        activation: str = "sine",
        omega0: float = 30.0,
        prefix: str = "net",
    ):
        if len(widths) < 2:
            raise ConfigurationError(f"An MLP needs at least two widths, got {list(widths)}")
        if activation not in ("sine", "relu"):
            raise ConfigurationError(f"Unknown activation '{activation}'")
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.omega0 = float(omega0)
        self.prefix = prefix

    def __repr__(self) -> str:
        return f"MLPSpec({self.prefix}, {self.widths}, {self.activation})"

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    def block_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        blocks = []
        for layer, (fan_in, fan_out) in enumerate(self.layer_shapes):
            blocks.append((f"{self.prefix}.W{layer}", (fan_in, fan_out)))
            blocks.append((f"{self.prefix}.b{layer}", (fan_out,)))
        return blocks

    def unpack_weights(self, params: Union[ParamVector, Mapping[str, Any]]) -> Weights:
        """Pull this net's (W, b) pairs out of a parameter vector or bound mapping"""
        blocks = _param_blocks(params)
        weights = []
        for layer, (fan_in, fan_out) in enumerate(self.layer_shapes):
            w_name, b_name = f"{self.prefix}.W{layer}", f"{self.prefix}.b{layer}"
            if w_name not in blocks or b_name not in blocks:
                raise ConfigurationError(f"Parameters are missing layer {layer} of {self.prefix}")
            W, b = blocks[w_name], blocks[b_name]
            if tuple(np.shape(ad.value_of(W))) != (fan_in, fan_out):
                raise ConfigurationError(
                    f"{w_name} has shape {np.shape(ad.value_of(W))}, expected {(fan_in, fan_out)}"
                )
            weights.append((W, b))
        return weights

    def forward(self, weights: Weights, x):
        """Evaluate on (N, in_dim) points; returns (N, out_dim)"""
        width = ad.value_of(x).shape[-1]
        if width != self.in_dim:
            raise ConfigurationError(f"{self.prefix} expects input width {self.in_dim}, got {width}")
        if len(weights) != self.n_layers:
            raise ConfigurationError(
                f"{self.prefix} expects {self.n_layers} layers, got {len(weights)}"
            )

        h = x
        for layer, (W, b) in enumerate(weights):
            h = ad.add(ad.matmul(h, W), b)
            if layer < self.n_layers - 1:
                h = ad.sin(ad.mul(h, self.omega0)) if self.activation == "sine" else ad.relu(h)
        return h

    def init_weights(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Sinusoidal-network init for sine nets, Kaiming-normal for ReLU nets"""
        blocks = {}
        for layer, (fan_in, fan_out) in enumerate(self.layer_shapes):
            if self.activation == "sine":
                if layer == 0:
                    bound = 1.0 / fan_in
                else:
                    bound = np.sqrt(6.0 / fan_in) / self.omega0
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            bias_bound = 1.0 / np.sqrt(fan_in)
            blocks[f"{self.prefix}.W{layer}"] = W
            blocks[f"{self.prefix}.b{layer}"] = rng.uniform(-bias_bound, bias_bound, size=fan_out)
        return blocks

    @classmethod
    def template(cls, config: FieldConfig) -> "MLPSpec":
        widths = [3] + [config.template_hidden] * (config.template_layers - 1) + [1]
        return cls(widths, "sine", config.omega0, prefix="template")

    @classmethod
    def deformation(cls, config: FieldConfig) -> "MLPSpec":
        widths = [3 + config.prior_dim] + [config.deform_hidden] * (config.deform_layers - 1) + [4]
        return cls(widths, "sine", config.omega0, prefix="deform")


class HyperSpec:
    """One ReLU hypernetwork per layer of the target net, each mapping z to (W, b)"""

    def __init__(self, target: MLPSpec, latent_dim: int, hidden: int = 64, layers: int = 3):
        self.target = target
        self.latent_dim = int(latent_dim)
        self.nets: List[MLPSpec] = []
        for layer, (fan_in, fan_out) in enumerate(target.layer_shapes):
            widths = [self.latent_dim] + [hidden] * (layers - 1) + [fan_in * fan_out + fan_out]
            self.nets.append(MLPSpec(widths, "relu", prefix=f"hyper.{layer}"))

    def block_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        blocks = []
        for net in self.nets:
            blocks.extend(net.block_shapes())
        return blocks

    def init_weights(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Kaiming init with the output layer scaled down so generated weights start near the bias"""
        blocks = {}
        for net, (fan_in_main, fan_out_main) in zip(self.nets, self.target.layer_shapes):
            blocks.update(net.init_weights(rng))
            last = net.n_layers - 1
            blocks[f"{net.prefix}.W{last}"] /= 100.0
            hidden = net.widths[-2]
            n_weight = fan_in_main * fan_out_main
            bias = np.empty(net.out_dim)
            bias[:n_weight] = rng.uniform(-1.0 / fan_in_main, 1.0 / fan_in_main, size=n_weight)
            bias[n_weight:] = rng.uniform(-1.0 / hidden, 1.0 / hidden, size=fan_out_main)
            blocks[f"{net.prefix}.b{last}"] = bias
        return blocks


def hypernet_params(z, hyper: HyperSpec, params: Union[ParamVector, Mapping[str, Any]]) -> Weights:
    """Generate the target net's weights from a latent code"""
    z_dim = ad.value_of(z).shape[-1]
    if z_dim != hyper.latent_dim:
        raise ConfigurationError(f"Latent code has dim {z_dim}, hypernetwork expects {hyper.latent_dim}")
    row = ad.reshape(z, (1, hyper.latent_dim))

    weights = []
    for net, (fan_in, fan_out) in zip(hyper.nets, hyper.target.layer_shapes):
        flat = ad.getitem(net.forward(net.unpack_weights(params), row), 0)
        n_weight = fan_in * fan_out
        W = ad.reshape(ad.getitem(flat, slice(0, n_weight)), (fan_in, fan_out))
        b = ad.getitem(flat, slice(n_weight, n_weight + fan_out))
        weights.append((W, b))
    return weights


# Semantic-aware deformation code -------------------------------------------

def softmax(o: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    shifted = np.exp(o - o.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _check_parts(o: np.ndarray, priors) -> None:
    k = ad.value_of(priors).shape[0]
    if o.shape[-1] != k:
        raise ConfigurationError(f"Semantic feature has {o.shape[-1]} parts, priors have {k}")


def sdc_soft(o, priors):
    """Softmax(o)-weighted combination of the part priors"""
    o = np.asarray(ad.value_of(o), dtype=np.float64)
    _check_parts(o, priors)
    single = o.ndim == 1
    weights = softmax(np.atleast_2d(o))
    alpha = ad.matmul(weights, priors)
    return ad.getitem(alpha, 0) if single else alpha


def sdc_hard(o, priors):
    """Prior of the argmax part; ties go to the smallest index"""
    o = np.asarray(ad.value_of(o), dtype=np.float64)
    _check_parts(o, priors)
    return ad.getitem(priors, np.argmax(o, axis=-1))


# Deformation and template --------------------------------------------------

@dataclass
class DeformOut:
    delta_x: Any
    delta_s: Any


@dataclass
class FieldOutput:
    """Shape-space SDF with the deformation that produced it"""
    sdf: Any
    warped: Any
    delta_x: Any
    delta_s: Any


def deform(x, z, alpha, params, model: "TemplateModel") -> DeformOut:
    """Deformation net with hypernetwork weights, evaluated on concat(x, alpha)"""
    weights = hypernet_params(z, model.hyper, params)
    out = model.deform_net.forward(weights, ad.concat([x, alpha], axis=-1))
    return DeformOut(
        delta_x=ad.getitem(out, (Ellipsis, slice(0, 3))),
        delta_s=ad.getitem(out, (Ellipsis, 3)),
    )


def template_eval(u, params, model: "TemplateModel"):
    """Template SDF at template-space points (N, 3) -> (N,)"""
    out = model.template_net.forward(model.template_net.unpack_weights(params), u)
    return ad.getitem(out, (Ellipsis, 0))


@dataclass
class ShapeContext:
    """Everything needed to evaluate one shape's field"""
    model: "TemplateModel"
    params: Any
    z: Any
    feature_fn: Callable[[np.ndarray], np.ndarray]


def field_eval(x, ctx: ShapeContext, features: Optional[np.ndarray] = None) -> FieldOutput:
    """F(x) = T(x + dx) + ds; ``features`` overrides the context's feature provider"""
    if features is None:
        features = ctx.feature_fn(np.asarray(ad.value_of(x)))
    model = ctx.model
    alpha = model.sdc(features, model.priors(ctx.params))
    out = deform(x, ctx.z, alpha, ctx.params, model)
    warped = ad.add(x, out.delta_x)
    sdf = ad.add(template_eval(warped, ctx.params, model), out.delta_s)
    return FieldOutput(sdf=sdf, warped=warped, delta_x=out.delta_x, delta_s=out.delta_s)


class TemplateModel:
    """Parameter layout and evaluation entry points for one trained category"""

    def __init__(self, config: FieldConfig, n_parts: int, n_shapes: int):
        if n_parts < 2:
            raise ConfigurationError(f"At least two semantic parts are required, got {n_parts}")
        self.config = config
        self.n_parts = int(n_parts)
        self.n_shapes = int(n_shapes)
        self.template_net = MLPSpec.template(config)
        self.deform_net = MLPSpec.deformation(config)
        self.hyper = HyperSpec(
            self.deform_net, config.latent_dim, config.hyper_hidden, config.hyper_layers
        )
        self.sdc = sdc_soft if config.sdc_mode == "soft" else sdc_hard
        self.layout = ParamLayout(
            self.template_net.block_shapes()
            + self.hyper.block_shapes()
            + [
                ("latent", (self.n_shapes, config.latent_dim)),
                ("priors", (self.n_parts, config.prior_dim)),
            ]
        )

    @property
    def network_blocks(self) -> List[str]:
        """Blocks shared by all shapes (everything but latent codes and priors)"""
        return [name for name in self.layout.names if name not in ("latent", "priors")]

    def init_params(self, seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        blocks = self.template_net.init_weights(rng)
        blocks.update(self.hyper.init_weights(rng))
        std = self.config.init_std
        blocks["latent"] = rng.normal(0.0, std, size=(self.n_shapes, self.config.latent_dim))
        blocks["priors"] = rng.normal(0.0, std, size=(self.n_parts, self.config.prior_dim))
        logger.info(
            f"Initialised model: {self.layout.size} parameters, "
            f"{self.n_shapes} shapes, {self.n_parts} parts"
        )
        return ParamVector.pack(self.layout, blocks)

    def priors(self, params):
        return _param_blocks(params)["priors"]

    def latent(self, params, index: int):
        if not 0 <= index < self.n_shapes:
            raise ConfigurationError(f"Shape index {index} out of range [0, {self.n_shapes})")
        return ad.getitem(_param_blocks(params)["latent"], index)

    def context(self, params, z, feature_fn: Callable[[np.ndarray], np.ndarray]) -> ShapeContext:
        return ShapeContext(model=self, params=params, z=z, feature_fn=feature_fn)

    def template_sdf(self, params, points: np.ndarray) -> np.ndarray:
        """Plain-array template evaluation"""
        return np.asarray(template_eval(np.asarray(points, dtype=np.float64), params, self))

    def with_latents(self, params: ParamVector, latents: np.ndarray) -> Tuple["TemplateModel", ParamVector]:
        """Copy of the model and parameters with a different set of latent codes"""
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        model = TemplateModel(self.config, self.n_parts, latents.shape[0])
        blocks = params.unpack()
        blocks["latent"] = latents
        return model, ParamVector.pack(model.layout, blocks)


def shape_field(model: TemplateModel, params, z, feature_fn: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    """Plain-array F(x) of one shape, for isosurfacing"""
    ctx = model.context(params, np.asarray(z, dtype=np.float64), feature_fn)

    def sdf(points: np.ndarray) -> np.ndarray:
        return np.asarray(field_eval(np.asarray(points, dtype=np.float64), ctx).sdf)

    return sdf
