"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Eager evaluation with a taped backward pass: every primitive computes its
value immediately and registers the exact vector-Jacobian products of its
inputs. Graphs are acyclic by construction; a tape belongs to one thread.

Everything is double precision. Values and adjoints are plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

CHECKPOINT_MAGIC = "# agblab-params v1"


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    # sum gradient over axes that numpy broadcasting introduced or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """One node of the computation graph: a value plus its adjoint slot."""

    __slots__ = ("value", "adjoint", "op", "parents", "_vjps", "name")

    def __init__(self, value, parents=(), op="leaf", vjps=(), name=None):
        self.value = _as_value(value)
        self.adjoint = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self._vjps = tuple(vjps)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_adjoint(self):
        self.adjoint = np.zeros_like(self.value)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; plain numbers/arrays are lifted to constant leaves
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def constant(value):
    return Tensor(value, op="const")


def _lift(x):
    return x if isinstance(x, Tensor) else constant(x)


def _binary(name, fn, a, b, vjp_a, vjp_b):
    try:
        value = fn(a.value, b.value)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(
        value,
        parents=(a, b),
        op=name,
        vjps=(
            lambda g: _unbroadcast(vjp_a(g), a.shape),
            lambda g: _unbroadcast(vjp_b(g), b.shape),
        ),
    )


def add(a, b):
    return _binary("add", np.add, a, b, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary("sub", np.subtract, a, b, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary("mul", np.multiply, a, b,
                   lambda g: g * b.value, lambda g: g * a.value)


def div(a, b):
    return _binary("div", np.divide, a, b,
                   lambda g: g / b.value,
                   lambda g: -g * a.value / (b.value * b.value))


def neg(a):
    return Tensor(-a.value, parents=(a,), op="neg", vjps=(lambda g: -g,))


def exp(a):
    out = np.exp(a.value)
    return Tensor(out, parents=(a,), op="exp", vjps=(lambda g: g * out,))


def square(a):
    return Tensor(a.value * a.value, parents=(a,), op="square",
                  vjps=(lambda g: g * (2.0 * a.value),))


def sigmoid(a):
    # stable logistic: exp overflows are avoided by branching on sign
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, parents=(a,), op="sigmoid",
                  vjps=(lambda g: g * out * (1.0 - out),))


def softplus(a):
    out = np.logaddexp(0.0, a.value)
    x = a.value

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return Tensor(out, parents=(a,), op="softplus", vjps=(vjp,))


def relu(a):
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), parents=(a,), op="relu",
                  vjps=(lambda g: g * mask,))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(a.value @ b.value, parents=(a, b), op="matmul",
                  vjps=(lambda g: g @ b.value.T, lambda g: a.value.T @ g))


def reduce_sum(a, axis=None):
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        g2 = np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.shape).copy()

    return Tensor(np.sum(a.value, axis=axis), parents=(a,), op="sum", vjps=(vjp,))


def mean(a):
    n = a.value.size
    return Tensor(np.mean(a.value), parents=(a,), op="mean",
                  vjps=(lambda g: np.broadcast_to(g / n, a.shape).copy(),))


def broadcast_to(a, shape):
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {tuple(shape)}")
    return Tensor(value, parents=(a,), op="broadcast",
                  vjps=(lambda g: _unbroadcast(g, a.shape),))


def reshape(a, shape):
    def vjp(g):
        return g.reshape(a.shape)

    return Tensor(a.value.reshape(shape), parents=(a,), op="reshape", vjps=(vjp,))


def slice_(a, index):
    """Basic (non-repeating) indexing; the adjoint scatters back in place."""

    def vjp(g):
        out = np.zeros_like(a.value)
        out[index] = g
        return out

    return Tensor(a.value[index], parents=(a,), op="slice", vjps=(vjp,))


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat of empty sequence")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes "
            + ", ".join(str(t.shape) for t in tensors)
        )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return Tensor(value, parents=tensors, op="concat",
                  vjps=tuple(make_vjp(i) for i in range(len(tensors))))


def dropout(a, rate, rng):
    """Inverted dropout with a stored mask so the backward pass is exact."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep * scale
    return Tensor(a.value * factor, parents=(a,), op="dropout",
                  vjps=(lambda g: g * factor,))


def tanh(a):
    """Composite tanh(x) = 2*sigmoid(2x) - 1, built from listed primitives."""
    return sigmoid(a * 2.0) * 2.0 - 1.0


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(root, params=None):
    """Propagate adjoints from a scalar root through the whole graph.

    Adjoints accumulate into each node's ``adjoint`` slot; calling backward
    twice without zeroing doubles them. If ``params`` (a ParameterStore) is
    given, returns its name -> adjoint map.
    """
    if root.value.size != 1:
        raise ArgumentError(
            f"backward requires a scalar root, got shape {root.value.shape}"
        )
    order = _topo(root)
    flowing = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.adjoint = node.adjoint + g
        for parent, vjp in zip(node.parents, node._vjps):
            contrib = vjp(g)
            prev = flowing.get(id(parent))
            flowing[id(parent)] = contrib if prev is None else prev + contrib
    if params is not None:
        return params.gradients()
    return None


class ParameterStore:
    """Named trainable arrays plus optimizer state and a step counter."""

    def __init__(self):
        self._params = {}
        self._slots = {}
        self.step = 0

    def add(self, name, value):
        if name in self._params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(value, op="param", name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def n_parameters(self):
        return sum(t.value.size for t in self._params.values())

    def zero_adjoints(self):
        for t in self._params.values():
            t.zero_adjoint()

    def gradients(self):
        return {name: t.adjoint.copy() for name, t in self._params.items()}

    def slot(self, name, kind):
        """Optimizer state buffer (momentum/moments), zeros on first access."""
        key = (name, kind)
        buf = self._slots.get(key)
        if buf is None:
            buf = np.zeros_like(self._params[name].value)
            self._slots[key] = buf
        return buf

    def snapshot(self):
        return {name: t.value.copy() for name, t in self._params.items()}

    def restore(self, snapshot):
        for name, value in snapshot.items():
            self._params[name].value = value.copy()
            self._params[name].zero_adjoint()

    def copy(self):
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.value.copy())
        other.step = self.step
        return other

    # -- checkpoint I/O: versioned flat text, exact float round-trip --------

    def save(self, path):
        lines = [CHECKPOINT_MAGIC, "name,shape,values"]
        for name, t in self._params.items():
            shape = "x".join(str(d) for d in t.value.shape) or "0"
            values = " ".join(float.hex(float(v)) for v in t.value.reshape(-1))
            lines.append(f"{name},{shape},{values}")
        lines.append(f"__step__,,{self.step}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise ArgumentError(f"{path}: not a parameter checkpoint (bad header)")
        store = cls()
        for line in lines[2:]:
            if not line:
                continue
            name, shape, values = line.split(",", 2)
            if name == "__step__":
                store.step = int(values)
                continue
            dims = tuple(int(d) for d in shape.split("x")) if shape != "0" else ()
            flat = np.array([float.fromhex(v) for v in values.split()],
                            dtype=np.float64)
            store.add(name, flat.reshape(dims))
        return store


def grad_check(builder, store, eps=1e-5):
    """Central-difference check of backward() over every parameter element.

    ``builder`` maps the store to a scalar Tensor and must be deterministic
    (fix any dropout masks). Returns the max over elements of
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ArgumentError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    store.zero_adjoints()
    root = builder(store)
    if not np.all(np.isfinite(root.value)):
        raise NumericError("grad_check: loss is not finite")
    analytic = backward(root, store)

    def evaluate():
        value = builder(store).value
        if not np.all(np.isfinite(value)):
            raise NumericError("grad_check: perturbed loss is not finite")
        return float(value)

    worst = 0.0
    for name in store.names():
        flat = store[name].value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga[i] - g_fd) / max(1.0, abs(ga[i]), abs(g_fd))
            worst = max(worst, err)
    return worst
