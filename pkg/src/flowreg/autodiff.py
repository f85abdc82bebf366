"""Minimal reverse-mode tape over numpy arrays.

Supports exactly the primitive set the registration pipelines need:
elementwise arithmetic, reductions, slicing, matmul, and trilinear
sampling with hand-written adjoints (w.r.t. both the sampled array and the
query points).  Losses deep in a cascade therefore reach the parameters of
every earlier stage through the recorded warps.

One tape/evaluation context per job; a context is not shared across
threads during a pass.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import interp
from .exceptions import ConfigurationError, NumericError

# Test hook: when true, the sampling adjoint w.r.t. the source array is
# deliberately scaled, so gradient checks must fail (negative control).
FAULT_INJECT = False


class Node:
    __slots__ = ("value", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), name="leaf"):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Node, vjp callable)
        self.requires_grad = bool(parents) and any(p.requires_grad for p, _ in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64), name="const")


def parameter(x) -> Node:
    n = Node(np.asarray(x, dtype=np.float64), name="param")
    n.requires_grad = True
    return n


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, value, vjp_a, vjp_b, name):
    a, b = as_node(a), as_node(b)
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(vjp_a(g), a.value.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(vjp_b(g), b.value.shape)))
    return Node(value, tuple(parents), name)


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.value + b.value, lambda g: g, lambda g: g, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.value - b.value, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.value * b.value, lambda g: g * b.value, lambda g: g * a.value, "mul")


def div(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(
        a, b, a.value / b.value,
        lambda g: g / b.value,
        lambda g: -g * a.value / (b.value * b.value),
        "div",
    )


def power(a, exponent: float):
    a = as_node(a)
    value = a.value ** exponent
    parents = ()
    if a.requires_grad:
        parents = ((a, lambda g: g * exponent * a.value ** (exponent - 1)),)
    return Node(value, parents, "pow")


def exp(a):
    a = as_node(a)
    value = np.exp(a.value)
    parents = ((a, lambda g: g * value),) if a.requires_grad else ()
    return Node(value, parents, "exp")


def log(a):
    a = as_node(a)
    parents = ((a, lambda g: g / a.value),) if a.requires_grad else ()
    return Node(np.log(a.value), parents, "log")


def sqrt(a):
    a = as_node(a)
    value = np.sqrt(a.value)
    parents = ((a, lambda g: g * 0.5 / value),) if a.requires_grad else ()
    return Node(value, parents, "sqrt")


def absolute(a):
    a = as_node(a)
    sign = np.sign(a.value)
    parents = ((a, lambda g: g * sign),) if a.requires_grad else ()
    return Node(np.abs(a.value), parents, "abs")


def sum_(a, axis=None):
    a = as_node(a)
    value = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    parents = ((a, vjp),) if a.requires_grad else ()
    return Node(value, parents, "sum")


def mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis), 1.0 / count)


def reshape(a, shape):
    a = as_node(a)
    parents = ((a, lambda g: g.reshape(a.value.shape)),) if a.requires_grad else ()
    return Node(a.value.reshape(shape), parents, "reshape")


def transpose(a):
    a = as_node(a)
    parents = ((a, lambda g: g.T),) if a.requires_grad else ()
    return Node(a.value.T, parents, "transpose")


def getitem(a, key):
    a = as_node(a)
    parts = key if isinstance(key, tuple) else (key,)
    plain = all(isinstance(k, (slice, int)) for k in parts)

    def vjp(g):
        out = np.zeros_like(a.value)
        if plain:
            out[key] += g  # slices/ints cannot alias, so plain += is safe
        else:
            np.add.at(out, key, g)
        return out

    parents = ((a, vjp),) if a.requires_grad else ()
    return Node(a.value[key], parents, "getitem")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(
        a, b, a.value @ b.value,
        lambda g: g @ b.value.T,
        lambda g: a.value.T @ g,
        "matmul",
    )


def sample(source, points) -> Node:
    """Trilinear sampling of ``source`` (nx,ny,nz[,C]) at ``points`` (N,3).

    Result has shape (N, C).  The adjoint w.r.t. the points is zero along
    any axis where the raw query falls outside the cuboid (clamped).
    """
    source, points = as_node(source), as_node(points)
    values, plan = interp.sample_forward(source.value, points.value)
    parents = []
    if source.requires_grad and points.requires_grad:
        # both adjoints are needed; compute them in one fused pass and hand
        # each parent its half (backward calls both vjps with the same g)
        cache = {}

        def pair(g):
            if cache.get("key") is not id(g):
                cache["key"] = id(g)
                cache["pair"] = interp.sample_adjoint_pair(plan, np.asarray(g))
            return cache["pair"]

        def vjp_source(g):
            out = pair(g)[0]
            return out * 1.01 if FAULT_INJECT else out

        parents.append((source, vjp_source))
        parents.append((points, lambda g: pair(g)[1]))
    elif source.requires_grad:

        def vjp_source_only(g):
            out = interp.sample_adjoint_source(plan, np.asarray(g))
            return out * 1.01 if FAULT_INJECT else out

        parents.append((source, vjp_source_only))
    elif points.requires_grad:
        parents.append(
            (points, lambda g: interp.sample_adjoint_points(plan, np.asarray(g)))
        )
    return Node(values, tuple(parents), "sample")


def resize(field_node, tgt_dims) -> Node:
    """Corner-aligned trilinear resize of a (nx, ny, nz, C) node; equivalent
    to sampling at the corner-aligned positions, but separable and cheaper."""
    field_node = as_node(field_node)
    src_dims = field_node.value.shape[:3]
    tgt_dims = tuple(tgt_dims)
    value = interp.resize_field(field_node.value, tgt_dims)
    parents = []
    if field_node.requires_grad:
        parents.append(
            (field_node, lambda g: interp.resize_field_adjoint(np.asarray(g), src_dims))
        )
    return Node(value, tuple(parents), "resize")


def backward(root: Node) -> dict:
    """Reverse accumulation from a scalar root; returns {id(node): grad}."""
    topo: list[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    owned: set[int] = set()  # accumulators we allocated, safe to add into
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                acc = grads[pid]
                if (
                    pid in owned
                    and isinstance(acc, np.ndarray)
                    and acc.shape == np.shape(contrib)
                ):
                    np.add(acc, contrib, out=acc)
                else:
                    # first contribution may alias another node's gradient
                    grads[pid] = grads[pid] + contrib
                    owned.add(pid)
            else:
                grads[pid] = contrib
        if node.parents:
            continue
        grads[id(node)] = g  # keep leaf gradients
    return grads


# --------------------------------------------------------------------------
# Parameter handling


class ParameterSet:
    """Ordered named parameter blocks (numpy arrays)."""

    def __init__(self, blocks):
        self.blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, arr in blocks.items():
            if name in self.blocks:
                raise ConfigurationError(f"duplicate parameter block {name!r}")
            self.blocks[name] = np.asarray(arr, dtype=np.float64).copy()

    def __iter__(self):
        return iter(self.blocks.items())

    def __getitem__(self, name):
        return self.blocks[name]

    def names(self):
        return list(self.blocks)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.blocks)


@dataclass
class GradientSet:
    grads: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads.items())


class _ParamNodes(dict):
    def __missing__(self, key):
        raise ConfigurationError(f"pipeline references unregistered parameter {key!r}")


def _name_nonfinite(root: Node) -> str:
    stack, seen = [root], set()
    worst = root.name
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.value)):
            worst = node.name
        stack.extend(p for p, _ in node.parents)
    return worst


def evaluate_with_gradients(pipeline, params: ParameterSet):
    """Forward + reverse pass of ``pipeline(nodes) -> scalar Node``.

    Returns (loss value, GradientSet congruent with params).
    """
    nodes = _ParamNodes()
    for name, arr in params:
        nodes[name] = parameter(arr)
    root = pipeline(nodes)
    loss = float(root.value)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss (primitive {_name_nonfinite(root)!r})")
    grads = backward(root)
    out = GradientSet()
    for name, arr in params:
        g = grads.get(id(nodes[name]))
        out.grads[name] = np.zeros_like(arr) if g is None else g
        if not np.all(np.isfinite(out.grads[name])):
            raise NumericError(f"non-finite gradient in block {name!r}")
    return loss, out


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_block: str
    worst_index: int
    checked: int
    excluded: int
    passed: bool

    def csv_line(self) -> str:
        return (
            f"{self.max_rel_error:.6e},{self.worst_block},{self.worst_index},"
            f"{self.checked},{self.excluded},{int(self.passed)}"
        )


def gradient_check(
    pipeline,
    params: ParameterSet,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare the reverse-mode gradient against central finite differences
    on a seeded random coordinate subset.

    Coordinates whose one-sided slopes disagree (the sampling point sits
    within ``step`` of an interpolation-cell or clamp boundary, where the
    objective is not differentiable) are excluded.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    loss0, analytic = evaluate_with_gradients(pipeline, params)

    rng = np.random.default_rng(seed)
    flat = [(name, i) for name, arr in params for i in range(arr.size)]
    order = rng.permutation(len(flat))

    work = params.copy()

    def forward() -> float:
        nodes = _ParamNodes()
        for name, arr in work:
            nodes[name] = constant(arr)
        return float(pipeline(nodes).value)

    max_rel, worst = 0.0, ("", -1)
    checked = excluded = 0
    for k in order:
        if checked >= n_coords:
            break
        name, i = flat[k]
        arr = work.blocks[name]
        orig = arr.flat[i]
        arr.flat[i] = orig + step
        f_plus = forward()
        arr.flat[i] = orig - step
        f_minus = forward()
        arr.flat[i] = orig

        s_plus = (f_plus - loss0) / step
        s_minus = (loss0 - f_minus) / step
        scale = max(abs(s_plus), abs(s_minus), 1e-8)
        if abs(s_plus - s_minus) > 0.05 * scale:
            excluded += 1
            continue
        central = 0.5 * (f_plus - f_minus) / step
        a = analytic[name].flat[i]
        rel = abs(a - central) / max(abs(a), abs(central), 1e-8)
        checked += 1
        if rel > max_rel:
            max_rel, worst = rel, (name, i)

    return GradientCheckReport(
        max_rel_error=max_rel,
        worst_block=worst[0],
        worst_index=worst[1],
        checked=checked,
        excluded=excluded,
        passed=max_rel < tolerance,
    )
