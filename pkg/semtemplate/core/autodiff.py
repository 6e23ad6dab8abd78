"""
Reverse-mode tape with first-order spatial duals.

Nested differentiation is forward-over-reverse: a ``Dual3`` carries a value and
its three partials with respect to the input coordinates, and both channels are
built from tape variables. Loss expressions containing spatial derivatives are
therefore ordinary tape expressions, and ``Tape.backward`` returns parameter
gradients through the derivative channels as well.

Tape nodes hold float64 arrays (one row per point). Broadcasting is limited to
what the networks need: row-wise bias adds, a leading tangent axis, and scalar
constants.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, UnsupportedPrimitiveError

logger = logging.getLogger(__name__)

Array = np.ndarray
Scalar = Union[int, float]


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to an operand shape"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class TapeNode:
    """One recorded operation: parents precede the node on the tape"""
    op: str
    parents: Tuple[int, ...]
    vjps: Tuple[Callable[[Array], Array], ...]
    shape: Tuple[int, ...]


class Tape:
    """Single-writer record of operations for one reverse pass"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._leaves: Dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: Union[Array, Scalar], name: str = "leaf") -> "Var":
        """Register an independent variable"""
        value = np.array(value, dtype=np.float64)
        index = len(self.nodes)
        self.nodes.append(TapeNode(f"leaf:{name}", (), (), value.shape))
        self._leaves[index] = name
        return Var(self, index, value)

    def record(
        self,
        op: str,
        value: Array,
        parents: Sequence["Var"],
        vjps: Sequence[Callable[[Array], Array]],
    ) -> "Var":
        """Append an operation whose parents are already on this tape"""
        for parent in parents:
            if parent.tape is not self:
                raise ConfigurationError(f"Operand of '{op}' belongs to another tape")
        index = len(self.nodes)
        self.nodes.append(
            TapeNode(op, tuple(p.index for p in parents), tuple(vjps), np.shape(value))
        )
        return Var(self, index, np.asarray(value, dtype=np.float64))

    def backward(self, output: "Var") -> Dict[int, Array]:
        """Reverse pass from a scalar output; returns gradients of the leaves"""
        if output.tape is not self:
            raise ConfigurationError("Output variable belongs to another tape")
        if output.value.size != 1:
            raise ConfigurationError(
                f"Backward needs a scalar output, got shape {output.value.shape}"
            )

        grads: List[Optional[Array]] = [None] * (output.index + 1)
        grads[output.index] = np.ones(output.value.shape, dtype=np.float64)

        # Each node is visited once, in reverse topological order
        for index in range(output.index, -1, -1):
            grad = grads[index]
            if grad is None:
                continue
            node = self.nodes[index]
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = vjp(grad)
                if grads[parent] is None:
                    grads[parent] = contribution
                else:
                    grads[parent] = grads[parent] + contribution
            if index not in self._leaves:
                grads[index] = None

        return {
            index: grads[index]
            for index in self._leaves
            if index <= output.index and grads[index] is not None
        }


class Var:
    """Handle to a tape node with its forward value"""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int, value: Array):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        handler = _UFUNCS.get(ufunc)
        if method != "__call__" or handler is None or kwargs:
            raise UnsupportedPrimitiveError(
                f"Unsupported primitive '{ufunc.__name__}' on a tape variable"
            )
        return handler(*inputs)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _tape_of(*operands) -> Optional[Tape]:
    for operand in operands:
        if isinstance(operand, Var):
            return operand.tape
    return None


def _val(x) -> Array:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _binary(op: str, a, b, out: Array, grad_a: Callable, grad_b: Callable):
    """Record a broadcasting binary op; grad_x maps the output adjoint to the operand"""
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        shape_a = a.shape
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(grad_a(g), shape_a))
    if isinstance(b, Var):
        shape_b = b.shape
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(grad_b(g), shape_b))
    return tape.record(op, out, parents, vjps)


def _unary(op: str, a, out: Array, grad_a: Callable):
    if not isinstance(a, Var):
        return out
    return a.tape.record(op, out, [a], [grad_a])


# Elementwise arithmetic ---------------------------------------------------

def add(a, b):
    if isinstance(a, Dual3):
        return a + b
    if isinstance(b, Dual3):
        return b.__radd__(a)
    av, bv = _val(a), _val(b)
    return _binary("add", a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    if isinstance(a, Dual3):
        return a - b
    if isinstance(b, Dual3):
        return b.__rsub__(a)
    av, bv = _val(a), _val(b)
    return _binary("sub", a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    if isinstance(a, Dual3):
        return a * b
    if isinstance(b, Dual3):
        return b.__rmul__(a)
    av, bv = _val(a), _val(b)
    return _binary("mul", a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    if isinstance(a, Dual3):
        return a / b
    if isinstance(b, Dual3):
        return b.__rtruediv__(a)
    av, bv = _val(a), _val(b)
    return _binary(
        "div", a, b, av / bv, lambda g: g / bv, lambda g: -g * av / (bv * bv)
    )


def neg(a):
    if isinstance(a, Dual3):
        return -a
    return _unary("neg", a, -_val(a), lambda g: -g)


def power(a, exponent: Scalar):
    """a ** p for a constant exponent"""
    if isinstance(exponent, (Var, Dual3)):
        raise UnsupportedPrimitiveError("Exponent must be a constant")
    if isinstance(a, Dual3):
        return a ** exponent
    av = _val(a)
    p = float(exponent)
    return _unary("pow", a, av ** p, lambda g: g * p * av ** (p - 1.0))


def square(a):
    return mul(a, a)


def sin(a):
    if isinstance(a, Dual3):
        return Dual3(sin(a.value), mul(cos(a.value), a.dx))
    av = _val(a)
    return _unary("sin", a, np.sin(av), lambda g: g * np.cos(av))


def cos(a):
    if isinstance(a, Dual3):
        return Dual3(cos(a.value), mul(neg(sin(a.value)), a.dx))
    av = _val(a)
    return _unary("cos", a, np.cos(av), lambda g: -g * np.sin(av))


def exp(a):
    if isinstance(a, Dual3):
        out = exp(a.value)
        return Dual3(out, mul(out, a.dx))
    out = np.exp(_val(a))
    return _unary("exp", a, out, lambda g: g * out)


def abs_(a):
    """|a| with subgradient 0 at 0"""
    if isinstance(a, Dual3):
        return Dual3(abs_(a.value), mul(np.sign(_val(a.value)), a.dx))
    av = _val(a)
    return _unary("abs", a, np.abs(av), lambda g: g * np.sign(av))


def sqrt(a):
    """Square root with derivative 0 at 0"""
    if isinstance(a, Dual3):
        out = sqrt(a.value)
        ov = _val(out)
        scale = np.divide(0.5, ov, out=np.zeros_like(ov), where=ov > 0)
        return Dual3(out, mul(scale, a.dx))
    out = np.sqrt(_val(a))
    scale = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
    return _unary("sqrt", a, out, lambda g: g * scale)


def maximum(a, b):
    """Elementwise max; ties go to the first argument"""
    if isinstance(a, Dual3) or isinstance(b, Dual3):
        a_value = a.value if isinstance(a, Dual3) else a
        b_value = b.value if isinstance(b, Dual3) else b
        out = maximum(a_value, b_value)
        ndim = len(np.shape(_val(out)))
        a_dx = _pad_tangent(a.dx, ndim) if isinstance(a, Dual3) else 0.0
        b_dx = _pad_tangent(b.dx, ndim) if isinstance(b, Dual3) else 0.0
        pick = _val(a_value) >= _val(b_value)
        return Dual3(out, _fit_tangent(where(pick, a_dx, b_dx), np.shape(_val(out))))
    av, bv = _val(a), _val(b)
    pick = av >= bv
    return _binary(
        "max", a, b, np.where(pick, av, bv),
        lambda g: g * pick, lambda g: g * ~pick,
    )


def minimum(a, b):
    """Elementwise min; ties go to the first argument"""
    return neg(maximum(neg(a), neg(b)))


def relu(a):
    return maximum(a, 0.0)


def clip(a, lo: Scalar, hi: Scalar):
    return minimum(maximum(a, lo), hi)


def where(mask: Array, a, b):
    """Select with a constant boolean mask"""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(mask, av, bv)
    return _binary(
        "where", a, b, out,
        lambda g: g * np.broadcast_to(mask, g.shape),
        lambda g: g * ~np.broadcast_to(mask, g.shape),
    )


# Linear algebra and shape ops ---------------------------------------------

def matmul(a, b):
    if isinstance(a, Dual3):
        return a @ b
    if isinstance(b, Dual3):
        raise UnsupportedPrimitiveError("Right operand of matmul cannot carry spatial tangents")
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim != 2:
        raise ConfigurationError(
            f"matmul expects (..., n, m) @ (m, p), got {av.shape} @ {bv.shape}"
        )
    return _binary(
        "matmul", a, b, av @ bv,
        lambda g: g @ bv.T,
        lambda g: np.swapaxes(av, -1, -2) @ g,
    )


def sum_(a, axis=None, keepdims: bool = False):
    if isinstance(a, Dual3):
        return a.sum(axis=axis, keepdims=keepdims)
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary("sum", a, out, vjp)


def mean(a, axis=None):
    if isinstance(a, Dual3):
        return a.mean(axis=axis)
    av = _val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis), float(count))


def reshape(a, shape: Sequence[int]):
    if isinstance(a, Dual3):
        return a.reshape(shape)
    av = _val(a)
    original = av.shape
    return _unary("reshape", a, av.reshape(shape), lambda g: g.reshape(original))


def moveaxis(a, source: int, destination: int):
    av = _val(a)
    return _unary(
        "moveaxis", a, np.moveaxis(av, source, destination),
        lambda g: np.moveaxis(g, destination, source),
    )


def _has_integer_array(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if isinstance(part, (list, np.ndarray)) and np.asarray(part).dtype.kind in "iu":
            return True
    return False


def getitem(a, key):
    if isinstance(a, Dual3):
        return a[key]
    av = _val(a)
    shape = av.shape
    scatter = _has_integer_array(key)

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        if scatter:
            # Repeated indices accumulate
            np.add.at(out, key, g)
        else:
            out[key] += g
        return out

    return _unary("getitem", a, av[key], vjp)


def concat(parts: Sequence, axis: int = -1):
    """Concatenate tape variables, arrays or duals along an axis"""
    if any(isinstance(p, Dual3) for p in parts):
        duals = [Dual3.lift(p) for p in parts]
        tangent_axis = axis + 1 if axis >= 0 else axis
        return Dual3(
            concat([d.value for d in duals], axis=axis),
            concat([d.dx for d in duals], axis=tangent_axis),
        )
    values = [_val(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    parents, vjps = [], []
    for i, part in enumerate(parts):
        if isinstance(part, Var):
            lo, hi = int(bounds[i]), int(bounds[i + 1])
            parents.append(part)
            vjps.append(lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
    return tape.record("concat", out, parents, vjps)


def dot(a, b, axis: int = -1):
    return sum_(mul(a, b), axis=axis)


def norm(a, axis: int = -1):
    return sqrt(sum_(mul(a, a), axis=axis))


def value_of(x) -> Array:
    """Forward value of a tape variable, dual or array"""
    if isinstance(x, Dual3):
        return value_of(x.value)
    return _val(x)


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: neg,
    np.sin: sin,
    np.cos: cos,
    np.exp: exp,
    np.absolute: abs_,
    np.sqrt: sqrt,
    np.maximum: maximum,
    np.minimum: minimum,
    np.square: square,
    np.matmul: matmul,
}


def _ndim(x) -> int:
    return len(np.shape(_val(x)))


def _pad_tangent(dx, ndim: int):
    """Insert unit axes after the tangent axis so that dx has rank 1 + ndim"""
    shape = np.shape(_val(dx))
    missing = ndim - (len(shape) - 1)
    if missing <= 0:
        return dx
    return reshape(dx, (3,) + (1,) * missing + tuple(shape[1:]))


def _fit_tangent(dx, shape: Tuple[int, ...]):
    """Broadcast a tangent to (3,) + shape"""
    target = (3,) + tuple(shape)
    dx = _pad_tangent(dx, len(shape))
    if np.shape(_val(dx)) == target:
        return dx
    return add(dx, np.zeros(target, dtype=np.float64))


def _assemble(value, dx) -> "Dual3":
    return Dual3(value, _fit_tangent(dx, np.shape(_val(value))))


def _raise_rank(d: "Dual3", ndim: int) -> "Dual3":
    shape = d.shape
    if len(shape) >= ndim:
        return d
    new_shape = (1,) * (ndim - len(shape)) + tuple(shape)
    return Dual3(reshape(d.value, new_shape), _pad_tangent(d.dx, ndim))


def _align(a: "Dual3", b: "Dual3") -> Tuple["Dual3", "Dual3"]:
    ndim = max(len(a.shape), len(b.shape))
    return _raise_rank(a, ndim), _raise_rank(b, ndim)


class Dual3:
    """
    Value with its partials w.r.t. the three input coordinates.

    ``value`` has shape S and ``dx`` has shape (3,) + S, where ``dx[j]`` is the
    derivative with respect to coordinate j. Either channel may be a plain array
    or a tape variable.
    """

    __slots__ = ("value", "dx")
    # ndarray operands defer to the reflected Dual3 operators
    __array_ufunc__ = None

    def __init__(self, value, dx):
        self.value = value
        self.dx = dx

    def __repr__(self) -> str:
        return f"Dual3(shape={self.shape})"

    @classmethod
    def seed(cls, points) -> "Dual3":
        """Independent spatial variable for an (N, 3) point array"""
        shape = np.shape(_val(points))
        if len(shape) < 1 or shape[-1] != 3:
            raise ConfigurationError(f"Seed points must have trailing dim 3, got {shape}")
        tangent = np.zeros((3,) + shape, dtype=np.float64)
        for j in range(3):
            tangent[j, ..., j] = 1.0
        return cls(points, tangent)

    @classmethod
    def constant(cls, value) -> "Dual3":
        """Quantity that does not depend on the input coordinates"""
        return cls(value, np.zeros((3,) + np.shape(_val(value)), dtype=np.float64))

    @classmethod
    def lift(cls, x) -> "Dual3":
        return x if isinstance(x, Dual3) else cls.constant(x)

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(_val(self.value))

    def __add__(self, other):
        if isinstance(other, Dual3):
            a, b = _align(self, other)
            return _assemble(add(a.value, b.value), add(a.dx, b.dx))
        value = add(self.value, other)
        return _assemble(value, _pad_tangent(self.dx, _ndim(value)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual3):
            a, b = _align(self, other)
            return _assemble(sub(a.value, b.value), sub(a.dx, b.dx))
        value = sub(self.value, other)
        return _assemble(value, _pad_tangent(self.dx, _ndim(value)))

    def __rsub__(self, other):
        value = sub(other, self.value)
        return _assemble(value, neg(_pad_tangent(self.dx, _ndim(value))))

    def __mul__(self, other):
        if isinstance(other, Dual3):
            a, b = _align(self, other)
            return _assemble(
                mul(a.value, b.value),
                add(mul(a.dx, b.value), mul(a.value, b.dx)),
            )
        value = mul(self.value, other)
        return _assemble(value, mul(_pad_tangent(self.dx, _ndim(value)), other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual3):
            a, b = _align(self, other)
            return _assemble(
                div(a.value, b.value),
                div(sub(mul(a.dx, b.value), mul(a.value, b.dx)), mul(b.value, b.value)),
            )
        value = div(self.value, other)
        return _assemble(value, div(_pad_tangent(self.dx, _ndim(value)), other))

    def __rtruediv__(self, other):
        value = div(other, self.value)
        coef = neg(div(value, self.value))
        return _assemble(value, mul(_pad_tangent(self.dx, _ndim(value)), coef))

    def __neg__(self):
        return Dual3(neg(self.value), neg(self.dx))

    def __pow__(self, exponent: Scalar):
        p = float(exponent)
        return Dual3(power(self.value, p), mul(mul(power(self.value, p - 1.0), p), self.dx))

    def __matmul__(self, weight):
        if isinstance(weight, Dual3):
            raise UnsupportedPrimitiveError("Weights cannot carry spatial tangents")
        return Dual3(matmul(self.value, weight), matmul(self.dx, weight))

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual3(getitem(self.value, key), getitem(self.dx, (slice(None),) + key))

    def sum(self, axis=None, keepdims: bool = False):
        ndim = len(self.shape)
        if axis is None:
            tangent_axes = tuple(range(1, ndim + 1))
        else:
            axes = np.atleast_1d(axis)
            tangent_axes = tuple(int(a) % ndim + 1 for a in axes)
        return Dual3(
            sum_(self.value, axis=axis, keepdims=keepdims),
            sum_(self.dx, axis=tangent_axes, keepdims=keepdims),
        )

    def mean(self, axis=None):
        shape = self.shape
        count = int(np.prod(shape)) if axis is None else int(
            np.prod([shape[a] for a in np.atleast_1d(axis)])
        )
        return self.sum(axis=axis) / float(count)

    def reshape(self, shape: Sequence[int]):
        shape = tuple(shape)
        return Dual3(reshape(self.value, shape), reshape(self.dx, (3,) + shape))

    def gradient(self):
        """Spatial gradient of a per-point scalar field: (N,) -> (N, 3)"""
        return moveaxis(self.dx, 0, -1)

    def jacobian(self):
        """Per-point Jacobian J[n, i, j] = d out_i / d x_j for (N, m) outputs"""
        return moveaxis(self.dx, 0, -1)


# Parameter vectors --------------------------------------------------------

@dataclass(frozen=True)
class ParamBlock:
    """Named index range inside a flat parameter vector"""
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamLayout:
    """Ordered mapping of named parameter blocks onto a flat array"""

    def __init__(self, blocks: Sequence[Tuple[str, Sequence[int]]]):
        self._blocks: Dict[str, ParamBlock] = {}
        offset = 0
        for name, shape in blocks:
            if name in self._blocks:
                raise ConfigurationError(f"Duplicate parameter block '{name}'")
            block = ParamBlock(name, offset, tuple(int(s) for s in shape))
            self._blocks[name] = block
            offset = block.stop
        self.size = offset

    def __iter__(self) -> Iterator[ParamBlock]:
        return iter(self._blocks.values())

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.describe() == other.describe()

    def __getitem__(self, name: str) -> ParamBlock:
        if name not in self._blocks:
            raise ConfigurationError(f"Unknown parameter block '{name}'")
        return self._blocks[name]

    @property
    def names(self) -> List[str]:
        return list(self._blocks)

    def describe(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(b.name, b.shape) for b in self._blocks.values()]


class ParamVector:
    """Flat float64 parameters with a block layout"""

    def __init__(self, layout: ParamLayout, data: Optional[Array] = None):
        self.layout = layout
        if data is None:
            data = np.zeros(layout.size, dtype=np.float64)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (layout.size,):
            raise ConfigurationError(
                f"Parameter data has shape {data.shape}, layout expects ({layout.size},)"
            )
        self.data = data

    def __len__(self) -> int:
        return self.layout.size

    def block(self, name: str) -> Array:
        """Writable view of one block"""
        block = self.layout[name]
        return self.data[block.offset:block.stop].reshape(block.shape)

    def unpack(self) -> Dict[str, Array]:
        return {b.name: self.block(b.name).copy() for b in self.layout}

    @classmethod
    def pack(cls, layout: ParamLayout, blocks: Mapping[str, Array]) -> "ParamVector":
        data = np.empty(layout.size, dtype=np.float64)
        for block in layout:
            if block.name not in blocks:
                raise ConfigurationError(f"Missing parameter block '{block.name}'")
            value = np.asarray(blocks[block.name], dtype=np.float64)
            if value.shape != block.shape:
                raise ConfigurationError(
                    f"Block '{block.name}' has shape {value.shape}, expected {block.shape}"
                )
            data[block.offset:block.stop] = value.ravel()
        return cls(layout, data)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def bind(self, tape: Tape) -> Dict[str, Var]:
        """Register every block as a leaf of the tape"""
        return {b.name: tape.leaf(self.block(b.name).copy(), b.name) for b in self.layout}

    def checksum(self, names: Optional[Sequence[str]] = None) -> str:
        digest = hashlib.sha256()
        for name in names or self.layout.names:
            digest.update(name.encode("utf-8"))
            digest.update(self.block(name).tobytes())
        return digest.hexdigest()


def value_and_grad(
    loss_fn: Callable[[Dict[str, Var]], object],
    params: ParamVector,
) -> Tuple[float, ParamVector, object]:
    """
    Evaluate ``loss_fn`` on tape-bound parameters and differentiate it.

    ``loss_fn`` may return the scalar loss or a ``(loss, aux)`` pair; ``aux`` is
    passed through untouched.
    """
    tape = Tape()
    leaves = params.bind(tape)
    result = loss_fn(leaves)
    aux = None
    if isinstance(result, tuple):
        result, aux = result

    grad = ParamVector(params.layout)
    if not isinstance(result, Var):
        return float(np.asarray(result)), grad, aux

    leaf_grads = tape.backward(result)
    for name, leaf in leaves.items():
        if leaf.index in leaf_grads:
            grad.block(name)[...] = leaf_grads[leaf.index]
    return float(result.value), grad, aux


def grad_params(loss_fn: Callable[[Dict[str, Var]], object], params: ParamVector) -> ParamVector:
    """Gradient of a scalar loss w.r.t. every parameter block"""
    _, grad, _ = value_and_grad(loss_fn, params)
    return grad


def forward_dual(net, params, x) -> Dual3:
    """
    Evaluate ``net`` at points ``x`` with exact spatial Jacobians.

    ``net`` is any network spec exposing ``unpack_weights`` and ``forward``
    (see ``fields.MLPSpec``).
    """
    weights = net.unpack_weights(params)
    return net.forward(weights, Dual3.seed(np.asarray(x, dtype=np.float64)))
