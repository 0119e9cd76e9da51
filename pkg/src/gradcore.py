"""
Dense float64 tensors with a reverse-mode tape, sized for stacks of fully
connected layers, plus the Adam update rule.

Every op computes its value eagerly with numpy. When an operand lives on a
ComputationTape the result is appended to that tape together with its
vector-Jacobian product, so tape order is a topological order by construction.
"""
import copy
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from src.exceptions import ContractError, DimensionError

FLOAT = np.float64


class Tensor:
    """A float64 array, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name", "_parents", "_vjp")

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=FLOAT)
        self.tape = tape
        self.name = name
        self._parents = parents
        self._vjp = vjp
        self.index = tape._register(self) if tape is not None else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.value.ravel()

    def item(self):
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class ComputationTape:
    """Ordered record of the primitive ops of one forward pass."""

    def __init__(self):
        self.nodes = []
        self.params = OrderedDict()

    def _register(self, tensor):
        self.nodes.append(tensor)
        return len(self.nodes) - 1

    def parameter(self, name, value):
        if name in self.params:
            raise ContractError(f"Parameter '{name}' already registered on this tape")
        node = Tensor(np.array(value, dtype=FLOAT, copy=True), tape=self, name=name)
        self.params[name] = node
        return node

    def watch(self, params):
        """Registers every array of a ParameterSet; returns name -> Tensor."""
        return OrderedDict((name, self.parameter(name, value)) for name, value in params.items())

    def __len__(self):
        return len(self.nodes)


Tape = ComputationTape


def constant(value):
    """An untracked operand; gradients never flow into it."""
    return Tensor(value)


def _record(value, parents, vjp):
    tapes = {id(p.tape): p.tape for p in parents if p.tape is not None}
    if len(tapes) > 1:
        raise ContractError("Operands were recorded on different tapes")
    if not tapes:
        return Tensor(value)
    return Tensor(value, tape=next(iter(tapes.values())), parents=parents, vjp=vjp)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# --- Primitive ops ---

def affine(x, weight, bias):
    """x @ weight + bias for x[batch x in], weight[in x out], bias[out]."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or bias.value.ndim != 1:
        raise DimensionError(
            f"affine expects 2-D input, 2-D weight and 1-D bias, got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(f"affine: {x.shape} @ {weight.shape} + {bias.shape} does not conform")

    xv, wv = x.value, weight.value
    out = xv @ wv + bias.value

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), vjp)


def relu(x):
    # Subgradient at exactly 0 is 0
    mask = x.value > 0
    out = np.where(mask, x.value, 0.0)

    def vjp(g):
        return (g * mask,)

    return _record(out, (x,), vjp)


def add(a, b):
    _same_shape("add", a, b)

    def vjp(g):
        return g, g

    return _record(a.value + b.value, (a, b), vjp)


def sub(a, b):
    _same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return _record(a.value - b.value, (a, b), vjp)


def mul(a, b):
    _same_shape("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return g * bv, g * av

    return _record(av * bv, (a, b), vjp)


def scale(a, factor):
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _record(a.value * factor, (a,), vjp)


def square(a):
    av = a.value

    def vjp(g):
        return (2.0 * av * g,)

    return _record(av * av, (a,), vjp)


def sqrt(a):
    out = np.sqrt(a.value)

    def vjp(g):
        # Zero subgradient where the root is exactly 0 keeps perfect fits finite
        grad = np.zeros_like(out)
        np.divide(0.5 * g, out, out=grad, where=out > 0)
        return (grad,)

    return _record(out, (a,), vjp)


def exp(a):
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def divide(a, denominator):
    """a / denominator for a constant array that broadcasts onto a's shape."""
    denominator = np.asarray(denominator, dtype=FLOAT)
    try:
        target = np.broadcast_shapes(a.shape, denominator.shape)
    except ValueError as e:
        raise DimensionError(f"divide: {a.shape} by {denominator.shape}: {e}") from e
    if target != a.shape:
        raise DimensionError(f"divide: denominator {denominator.shape} would broadcast {a.shape}")

    def vjp(g):
        return (g / denominator,)

    return _record(a.value / denominator, (a,), vjp)


def sum(a, axis=None):
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis=None):
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def columns(a, start, stop):
    """Column slice a[:, start:stop] of a 2-D tensor."""
    if a.value.ndim != 2:
        raise DimensionError(f"columns expects a 2-D tensor, got {a.shape}")
    shape = a.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=FLOAT)
        grad[:, start:stop] = g
        return (grad,)

    return _record(a.value[:, start:stop], (a,), vjp)


# --- Reverse pass ---

def backward(tape, loss_node):
    """
    Exact gradients of a scalar node w.r.t. every parameter on the tape.
    The tape is left untouched, so several scalars may be differentiated
    from one forward pass.
    """
    if loss_node.tape is not tape:
        raise ContractError("Loss node was not recorded on this tape")
    if loss_node.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_node.shape}")

    adjoints = {loss_node.index: np.ones_like(loss_node.value)}
    grads = {}
    for node in reversed(tape.nodes[: loss_node.index + 1]):
        g = adjoints.pop(node.index, None)
        if g is None:
            continue
        if node.name is not None:
            grads[node.name] = g
        if node._vjp is None:
            continue
        for parent, parent_grad in zip(node._parents, node._vjp(g)):
            if parent.tape is None:
                continue
            if parent.index in adjoints:
                adjoints[parent.index] = adjoints[parent.index] + parent_grad
            else:
                adjoints[parent.index] = parent_grad

    return OrderedDict(
        (name, np.array(grads[name], dtype=FLOAT) if name in grads else np.zeros_like(node.value))
        for name, node in tape.params.items()
    )


# --- Parameters & optimizer ---

class ParameterSet:
    """Named float64 arrays in a fixed order; the order defines the flat layout."""

    def __init__(self, arrays=None):
        self._arrays = OrderedDict()
        for name, value in (arrays or {}).items():
            if name in self._arrays:
                raise ContractError(f"Duplicate parameter name '{name}'")
            self._arrays[name] = np.array(value, dtype=FLOAT, copy=True)

    @property
    def names(self):
        return list(self._arrays)

    @property
    def shapes(self):
        return OrderedDict((name, a.shape) for name, a in self._arrays.items())

    @property
    def size(self):
        return int(np.sum([a.size for a in self._arrays.values()], dtype=np.int64))

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def flatten(self):
        if not self._arrays:
            return np.zeros(0, dtype=FLOAT)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=FLOAT)
        if vector.shape != (self.size,):
            raise DimensionError(f"Flat vector has shape {vector.shape}, expected ({self.size},)")
        arrays, offset = OrderedDict(), 0
        for name, a in self._arrays.items():
            arrays[name] = vector[offset: offset + a.size].reshape(a.shape)
            offset += a.size
        return ParameterSet(arrays)

    def copy(self):
        return ParameterSet(self._arrays)

    def merge(self, other):
        clash = set(self._arrays) & set(other.names)
        if clash:
            raise ContractError(f"Parameter names overlap: {sorted(clash)}")
        return ParameterSet(OrderedDict(list(self._arrays.items()) + list(other.items())))

    def subset(self, names):
        return ParameterSet(OrderedDict((name, self._arrays[name]) for name in names))

    def same_layout(self, other):
        return self.shapes == other.shapes

    def __repr__(self):
        return f"ParameterSet({len(self)} tensors, {self.size} values)"


def flatten_grads(grads, names):
    """Concatenates a gradient mapping in the given parameter order."""
    return np.concatenate([np.ravel(grads[name]) for name in names]) if names else np.zeros(0)


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def copy(self):
        return copy.deepcopy(self)


def adam_step(params, grad, state):
    """
    One bias-corrected Adam update. Returns a new ParameterSet; `state` is
    advanced in place. Moments for names seen for the first time start at 0.
    """
    if set(grad) != set(params.names):
        missing = sorted(set(params.names) - set(grad))
        extra = sorted(set(grad) - set(params.names))
        raise ContractError(f"Gradient keys do not match parameters (missing={missing}, unexpected={extra})")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step

    updated = OrderedDict()
    for name, value in params.items():
        g = np.asarray(grad[name], dtype=FLOAT)
        if g.shape != value.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter has {value.shape}")

        m = state.first_moment.get(name, np.zeros_like(value))
        v = state.second_moment.get(name, np.zeros_like(value))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v

        updated[name] = value - state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)

    return ParameterSet(updated)
