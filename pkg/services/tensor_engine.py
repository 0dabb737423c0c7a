"""
Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation the encoders, the fusion block and the training
loop need lives here. A Tape records operations in execution order; backward()
walks that order in reverse once and leaves a .grad on every recorded tensor.
Tensors created without a tape are constants and never receive gradients.
"""
import math

import numpy as np
from scipy.special import erf

from services.errors import AllMaskedRow, DomainError, NumericError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ('data', 'grad', 'tape', 'node')
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor operator

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tape_id(self):
        return self.node

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ('parents', 'backward_fn', 'tensor')

    def __init__(self, parents, backward_fn, tensor):
        self.parents = parents
        self.backward_fn = backward_fn
        self.tensor = tensor


class Tape:
    """Ordered record of operations. Recording order is a valid topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data):
        t = Tensor(data, tape=self, node=len(self.nodes))
        self.nodes.append(_Node((), None, t))
        return t

    def record(self, value, inputs, backward_fn):
        t = Tensor(value, tape=self, node=len(self.nodes))
        parents = tuple(x.node if x.tape is self else None for x in inputs)
        self.nodes.append(_Node(parents, backward_fn, t))
        return t

    def leaves(self):
        return [n.tensor for n in self.nodes if n.backward_fn is None]

    def backward(self, root):
        """
        Reverse sweep from a scalar root.

        Every recorded tensor up to the root ends with .grad set; leaves the
        root does not depend on get zeros.
        """
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise NumericError("root was not recorded on this tape")

        grads = [None] * (root.node + 1)
        grads[root.node] = np.ones_like(root.data)
        for node in self.nodes:
            node.tensor.grad = None

        for idx in range(root.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None:
                continue
            node.tensor.grad = g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

        for node in self.nodes:
            if node.backward_fn is None and node.tensor.grad is None:
                node.tensor.grad = np.zeros_like(node.tensor.data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value, inputs, backward_fn):
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise NumericError("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, backward_fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data):
    return Tensor(data)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = _lift(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, p):
    """Elementwise a**p for a constant exponent."""
    a = _lift(a)
    if p == 0:
        return Tensor(np.ones_like(a.data))
    return _emit(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def clip_min(a, lo):
    """max(a, lo); gradient flows only where a >= lo."""
    a = _lift(a)
    keep = a.data >= lo
    return _emit(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def relu(a):
    a = _lift(a)
    keep = a.data > 0
    return _emit(a.data * keep, (a,), lambda g: (g * keep,))


def gelu(a):
    """Exact (erf) GELU."""
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _emit(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------------------
# Shape / reduction
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), backward)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    a = _lift(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _lift(a)
    inverse = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, key):
    a = _lift(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit(a.data[key], (a,), backward)


def take(a, indices, axis=0):
    """Gather along one axis with a 1-D integer index array (embedding lookup)."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _emit(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Normalisation / attention kernels
# ---------------------------------------------------------------------------

def softmax_masked(logits, valid=None, allow_all_masked=False):
    """
    Softmax over the last axis counting only valid positions.

    Invalid positions are excluded before normalisation, so their outputs are
    exactly 0 and their logit values never reach the result. Rows with no valid
    position raise AllMaskedRow unless allow_all_masked, in which case the row
    is all zeros.
    """
    logits = _lift(logits)
    x = logits.data
    if valid is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)

    row_any = valid.any(axis=-1, keepdims=True)
    if not allow_all_masked and not row_any.all():
        raise AllMaskedRow("softmax row has no valid position")

    masked = np.where(valid, x, -np.inf)
    m = np.where(row_any, masked.max(axis=-1, keepdims=True), 0.0)
    e = np.where(valid, np.exp(masked - m), 0.0)
    s = np.where(row_any, e.sum(axis=-1, keepdims=True), 1.0)
    out = e / s

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (logits,), backward)


def softmax(logits):
    return softmax_masked(logits, None)


def layer_norm(x, gain, bias, eps=1e-5):
    """LayerNorm over the last axis with population variance."""
    if eps < 0:
        raise DomainError(f"layer_norm eps must be >= 0, got {eps}")
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def check_finite(t, what):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """
    Named float64 parameter arrays in insertion order.
    bind() exposes them as leaves of a tape for one forward pass.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name}")
        self._params[name] = np.asarray(array, dtype=np.float64)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __setitem__(self, name, array):
        array = np.asarray(array, dtype=np.float64)
        if array.shape != self._params[name].shape:
            raise ShapeError(f"{name}: shape {array.shape} != {self._params[name].shape}")
        self._params[name] = array

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def bind(self, tape=None):
        if tape is None:
            return {name: Tensor(arr) for name, arr in self._params.items()}
        return {name: tape.leaf(arr) for name, arr in self._params.items()}

    def snapshot(self):
        return {name: arr.copy() for name, arr in self._params.items()}

    def restore(self, snapshot):
        for name, arr in snapshot.items():
            self[name] = arr.copy()


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_gradient(fn, arrays, h=1e-5):
    """
    Central differences of a scalar fn(*arrays) w.r.t. every entry of every array.
    fn receives plain numpy arrays and must return a float.
    """
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            args_p = [a.copy() for a in arrays]
            args_m = [a.copy() for a in arrays]
            args_p[k].reshape(-1)[i] += h
            args_m[k].reshape(-1)[i] -= h
            g.reshape(-1)[i] = (fn(*args_p) - fn(*args_m)) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradient(build, arrays):
    """Gradients of build(*leaf_tensors) (a scalar Tensor) via one tape."""
    tape = Tape()
    leaves = [tape.leaf(np.asarray(a, dtype=np.float64)) for a in arrays]
    root = build(*leaves)
    tape.backward(root)
    return [leaf.grad for leaf in leaves]


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-3, np.abs(a) + np.abs(b))))
