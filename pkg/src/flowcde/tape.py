"""Scalar reverse-mode differentiation on a flat, append-only tape.

A :class:`Tape` stores one node per recorded scalar operation.  Nodes are
identified by their insertion index, parents always have smaller ids, so
insertion order is a topological order and the backward sweep is a single
reverse pass.  The op vocabulary is deliberately small (add, mul, neg, div,
exp, log, tanh, softplus, abs, square); everything else is composed from it.

Node storage is struct-of-arrays for speed: ``vals[i]`` is the forward value
and ``deps[i]`` a flat tuple ``(parent, local_derivative, ...)``.  Two fused
builders, :meth:`Tape.lincomb` and :meth:`Tape.vdot`, record a whole linear
combination or an inner product of tape variables as a single node whose
local derivatives follow the sum/product rules exactly; values and gradients
are identical (up to association order) to the op-by-op composition, which
``tests/test_tape.py`` asserts.

Tapes are single-writer.  Independent tapes may be evaluated concurrently;
there is no shared state.

:class:`Var` is a thin ergonomic wrapper (tape + node id) with operator
overloading so closed-form expressions (flow densities, likelihood heads)
can be written once and evaluated either on floats/arrays or on a tape.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, StructuralError

__all__ = [
    "Tape",
    "Var",
    "grad_check",
    "exp",
    "log",
    "log1p",
    "tanh",
    "softplus",
    "square",
    "sqrt",
]


def _softplus_float(x):
    # stable ln(1+e^x) for any finite x
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _sigmoid_float(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Tape:
    """Append-only computation graph over scalars."""

    __slots__ = ("vals", "deps", "kinds", "_leaf_ids")

    def __init__(self):
        self.vals: list[float] = []
        self.deps: list[tuple] = []
        self.kinds: list[str] = []
        self._leaf_ids: list[int] = []

    def __len__(self):
        return len(self.vals)

    # -- construction -----------------------------------------------------

    def leaf(self, value) -> int:
        """Append an input node (no parents). Constants are leaves too."""
        v = float(value)
        self.vals.append(v)
        self.deps.append(())
        self.kinds.append("leaf")
        self._leaf_ids.append(len(self.vals) - 1)
        return len(self.vals) - 1

    def record(self, kind, input_ids, value, local_derivs) -> int:
        """Generic validated record; the op builders below are shortcuts.

        Raises StructuralError if any input id is not already on the tape.
        """
        n = len(self.vals)
        flat = []
        if len(input_ids) != len(local_derivs):
            raise StructuralError(
                f"{len(input_ids)} inputs but {len(local_derivs)} local derivatives"
            )
        for i, d in zip(input_ids, local_derivs):
            i = int(i)
            if not 0 <= i < n:
                raise StructuralError(f"unknown input id {i} (tape has {n} nodes)")
            flat.append(i)
            flat.append(float(d))
        self.vals.append(float(value))
        self.deps.append(tuple(flat))
        self.kinds.append(kind)
        return len(self.vals) - 1

    def parents(self, node_id) -> tuple:
        """((parent_id, local_derivative), ...) of a node."""
        d = self.deps[node_id]
        return tuple((d[k], d[k + 1]) for k in range(0, len(d), 2))

    def value(self, node_id) -> float:
        return self.vals[node_id]

    # -- op builders (unvalidated; ids must come from this tape) ----------

    def add(self, i, j):
        v = self.vals
        v.append(v[i] + v[j])
        self.deps.append((i, 1.0, j, 1.0))
        self.kinds.append("add")
        return len(v) - 1

    def addc(self, i, c):
        v = self.vals
        v.append(v[i] + c)
        self.deps.append((i, 1.0))
        self.kinds.append("add")
        return len(v) - 1

    def mul(self, i, j):
        v = self.vals
        a = v[i]
        b = v[j]
        v.append(a * b)
        self.deps.append((i, b, j, a))
        self.kinds.append("mul")
        return len(v) - 1

    def mulc(self, i, c):
        v = self.vals
        v.append(v[i] * c)
        self.deps.append((i, c))
        self.kinds.append("mul")
        return len(v) - 1

    def neg(self, i):
        v = self.vals
        v.append(-v[i])
        self.deps.append((i, -1.0))
        self.kinds.append("neg")
        return len(v) - 1

    def div(self, i, j):
        v = self.vals
        a = v[i]
        b = v[j]
        val = a / b
        v.append(val)
        self.deps.append((i, 1.0 / b, j, -val / b))
        self.kinds.append("div")
        return len(v) - 1

    def exp(self, i):
        v = self.vals
        val = math.exp(v[i])
        v.append(val)
        self.deps.append((i, val))
        self.kinds.append("exp")
        return len(v) - 1

    def log(self, i):
        v = self.vals
        x = v[i]
        v.append(math.log(x))
        self.deps.append((i, 1.0 / x))
        self.kinds.append("log")
        return len(v) - 1

    def tanh(self, i):
        v = self.vals
        t = math.tanh(v[i])
        v.append(t)
        self.deps.append((i, 1.0 - t * t))
        self.kinds.append("tanh")
        return len(v) - 1

    def softplus(self, i):
        v = self.vals
        x = v[i]
        v.append(_softplus_float(x))
        self.deps.append((i, _sigmoid_float(x)))
        self.kinds.append("softplus")
        return len(v) - 1

    def abs(self, i):
        # subgradient sign(0) = 0: measure-zero kink, keeps backward total
        v = self.vals
        x = v[i]
        v.append(-x if x < 0.0 else x)
        self.deps.append((i, -1.0 if x < 0.0 else (1.0 if x > 0.0 else 0.0)))
        self.kinds.append("abs")
        return len(v) - 1

    def square(self, i):
        v = self.vals
        x = v[i]
        v.append(x * x)
        self.deps.append((i, 2.0 * x))
        self.kinds.append("square")
        return len(v) - 1

    def sum(self, ids):
        """n-ary add."""
        v = self.vals
        tot = 0.0
        flat = []
        for i in ids:
            tot += v[i]
            flat.append(i)
            flat.append(1.0)
        v.append(tot)
        self.deps.append(tuple(flat))
        self.kinds.append("add")
        return len(v) - 1

    def lincomb(self, ids, coeffs, const=0.0):
        """const + sum(c * x for c, x in zip(coeffs, nodes)) as one node."""
        v = self.vals
        tot = const
        flat = []
        for i, c in zip(ids, coeffs):
            tot += c * v[i]
            flat.append(i)
            flat.append(c)
        v.append(tot)
        self.deps.append(tuple(flat))
        self.kinds.append("add")
        return len(v) - 1

    def vdot(self, ids_a, ids_b, bias=None):
        """sum(a_k * b_k) (+ bias node) as one node, product-rule locals."""
        v = self.vals
        tot = 0.0
        flat = []
        for i, j in zip(ids_a, ids_b):
            a = v[i]
            b = v[j]
            tot += a * b
            flat.append(i)
            flat.append(b)
            flat.append(j)
            flat.append(a)
        if bias is not None:
            tot += v[bias]
            flat.append(bias)
            flat.append(1.0)
        v.append(tot)
        self.deps.append(tuple(flat))
        self.kinds.append("mul")
        return len(v) - 1

    # -- reverse sweep -----------------------------------------------------

    def backward(self, output) -> list[float]:
        """Adjoints d(output)/d(node) for every node, by one reverse pass."""
        vals = self.vals
        n = len(vals)
        if not 0 <= output < n:
            raise StructuralError(f"unknown output id {output}")
        deps = self.deps
        adj = [0.0] * n
        adj[output] = 1.0
        for nid in range(output, -1, -1):
            a = adj[nid]
            if a == 0.0:
                continue
            if a != a:
                raise NumericError(
                    f"NaN adjoint at node {nid} ({self.kinds[nid]})", node_id=nid
                )
            d = deps[nid]
            for k in range(0, len(d), 2):
                adj[d[k]] += a * d[k + 1]
        return adj

    def gradient(self, output) -> dict[int, float]:
        """d(output)/d(leaf) for every leaf node, keyed by node id."""
        adj = self.backward(output)
        return {i: adj[i] for i in self._leaf_ids}


class Var:
    """A scalar on a tape, with operator overloading.

    Arithmetic mixes freely with Python floats; each operation appends one
    node (or two, for float-float-free compositions such as subtraction).
    """

    __slots__ = ("tape", "id")

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.vals[self.id]

    def __float__(self):
        return self.tape.vals[self.id]

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    def __add__(self, other):
        t = self.tape
        if isinstance(other, Var):
            return Var(t, t.add(self.id, other.id))
        return Var(t, t.addc(self.id, float(other)))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        if isinstance(other, Var):
            return Var(t, t.add(self.id, t.neg(other.id)))
        return Var(t, t.addc(self.id, -float(other)))

    def __rsub__(self, other):
        t = self.tape
        return Var(t, t.addc(t.neg(self.id), float(other)))

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Var):
            return Var(t, t.mul(self.id, other.id))
        return Var(t, t.mulc(self.id, float(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, Var):
            return Var(t, t.div(self.id, other.id))
        return Var(t, t.mulc(self.id, 1.0 / float(other)))

    def __rtruediv__(self, other):
        t = self.tape
        num = t.leaf(float(other))
        return Var(t, t.div(num, self.id))

    def __neg__(self):
        return Var(self.tape, self.tape.neg(self.id))

    def __abs__(self):
        return Var(self.tape, self.tape.abs(self.id))


# -- generic scalar math: works on Var, floats, and numpy arrays ----------


def exp(x):
    if isinstance(x, Var):
        return Var(x.tape, x.tape.exp(x.id))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return Var(x.tape, x.tape.log(x.id))
    return np.log(x)


def log1p(x):
    if isinstance(x, Var):
        t = x.tape
        return Var(t, t.log(t.addc(x.id, 1.0)))
    return np.log1p(x)


def tanh(x):
    if isinstance(x, Var):
        return Var(x.tape, x.tape.tanh(x.id))
    return np.tanh(x)


def softplus(x):
    if isinstance(x, Var):
        return Var(x.tape, x.tape.softplus(x.id))
    return np.logaddexp(0.0, x)


def square(x):
    if isinstance(x, Var):
        return Var(x.tape, x.tape.square(x.id))
    return np.square(x)


def sqrt(x):
    if isinstance(x, Var):
        # composed: exp(0.5 * log(x))
        t = x.tape
        return Var(t, t.exp(t.mulc(t.log(x.id), 0.5)))
    return np.sqrt(x)


def grad_check(f, point, step=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``f`` takes a sequence of scalars (Var or float, interchangeably) and
    returns a scalar.  The finite-difference side evaluates ``f`` on plain
    floats, so it is independent of the tape machinery it checks.
    """
    if step <= 0.0:
        raise StructuralError("step must be positive")
    point = [float(x) for x in point]
    tape = Tape()
    xs = [Var(tape, tape.leaf(x)) for x in point]
    out = f(xs)
    y0 = float(out)
    if not math.isfinite(y0):
        raise NumericError(f"function value {y0} is not finite")
    adj = tape.backward(out.id)
    worst = 0.0
    for i in range(len(point)):
        bumped = list(point)
        bumped[i] = point[i] + step
        fp = float(f(bumped))
        bumped[i] = point[i] - step
        fm = float(f(bumped))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("non-finite value in finite-difference probe")
        numeric = (fp - fm) / (2.0 * step)
        analytic = adj[xs[i].id]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
