"""Minimal dense-tensor engine with reverse-mode differentiation.

Values live in numpy arrays (float64 by default, float32 as an opt-in
inference mode). Differentiable ops record nodes, in execution order, onto
the innermost active Tape; `backward` replays the tape in reverse, visiting
each node exactly once. With no tape active every op runs eagerly, which is
the inference path.

Shape discipline is strict: elementwise ops require identical shapes and
matmul is 2-D only. The single sanctioned broadcast is `bias_add` over the
last axis. Deliberate consequences baked into the adjoints:

* gather / scatter_add are exact adjoints of each other;
* softmax subtracts the row max before exponentiation;
* l1_normalize maps an all-zero slice to the uniform distribution 1/k and
  assigns it zero gradient;
* reduce_max routes gradient to the first maximal element along the axis.
"""

from __future__ import annotations

import dataclasses
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class Tensor:
    """Dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: object   # grad_out -> tuple of grads aligned with inputs (None allowed)


class Tape:
    """Computation graph: nodes appended in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []


_tls = threading.local()


def _tape_stack() -> list:
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block."""
    tape = Tape()
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, inputs: tuple, value: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, dtype=value.dtype)
    tape = active_tape()
    if tape is not None and needs:
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _make("scale", (a,), a.data * s, lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", (a,), out, bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", (a,), out, bwd)


def l1_normalize(a, axis: int = -1) -> Tensor:
    """x / sum(|x|) along axis; an all-zero slice becomes uniform 1/k."""
    a = _as_tensor(a)
    s = np.abs(a.data).sum(axis=axis, keepdims=True)
    zero = s == 0
    k = a.data.shape[axis]
    safe = np.where(zero, 1.0, s)
    out = np.where(zero, 1.0 / k, a.data / safe)
    sign = np.sign(a.data)

    def bwd(g):
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        gx = g / safe - sign * dot / (safe * safe)
        return (np.where(zero, 0.0, gx),)

    return _make("l1_normalize", (a,), out, bwd)


def gather(a, idx) -> Tensor:
    """Rows of a selected by an integer index array.

    Output shape is idx.shape + a.shape[1:]; repeated indices are allowed
    (the adjoint accumulates).
    """
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx.ravel(), g.reshape(idx.size, *a.data.shape[1:]))
        return (buf,)

    return _make("gather", (a,), a.data[idx], bwd)


def scatter_add(a, idx, num_rows: int) -> Tensor:
    """Accumulate slices of a into num_rows rows; exact adjoint of gather."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.shape[: idx.ndim] != idx.shape:
        raise ValueError(
            f"scatter_add: leading dims {a.data.shape[:idx.ndim]} must equal index shape {idx.shape}"
        )
    rest = a.data.shape[idx.ndim:]
    out = np.zeros((num_rows, *rest), dtype=a.data.dtype)
    np.add.at(out, idx.ravel(), a.data.reshape(idx.size, *rest))

    def bwd(g):
        return (g[idx],)

    return _make("scatter_add", (a,), out, bwd)


def reduce_sum(a, axis: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make("reduce_sum", (a,), a.data.sum(axis=axis), bwd)


def reduce_mean(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    n = a.data.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)

    return _make("reduce_mean", (a,), a.data.mean(axis=axis), bwd)


def reduce_max(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data.max(axis=axis)
    hit = a.data == np.expand_dims(out, axis)
    # gradient flows to the first maximal entry only
    first = np.logical_and(hit, np.cumsum(hit, axis=axis) == 1)

    def bwd(g):
        return (np.expand_dims(g, axis) * first,)

    return _make("reduce_max", (a,), out, bwd)


def concat(parts, axis: int) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", parts, np.concatenate([p.data for p in parts], axis=axis), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make("reshape", (a,), a.data.reshape(shape), bwd)


def bias_add(a, b) -> Tensor:
    """a[..., C] + b[C] — the only broadcast in the op set."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"bias_add: bias {b.data.shape} does not match {a.data.shape}")
    lead = tuple(range(a.data.ndim - 1))

    def bwd(g):
        return (g, g.sum(axis=lead) if lead else g)

    return _make("bias_add", (a, b), a.data + b.data, bwd)


# ---------------------------------------------------------------------------
# linear layer
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor   # (out, in)
    bias: Tensor     # (out,)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearParams:
    """Uniform +-sqrt(1/fan_in) weights, zero bias."""
    s = (1.0 / n_in) ** 0.5
    w = rng.uniform(-s, s, size=(n_out, n_in))
    return LinearParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(n_out), requires_grad=True),
    )


def linear(p: LinearParams, x) -> Tensor:
    """x[..., n_in] -> x W^T + b. Leading dims are flattened internally."""
    x = _as_tensor(x)
    n_in = p.weight.data.shape[1]
    if x.data.shape[-1] != n_in:
        raise ValueError(f"linear: input width {x.data.shape[-1]} != {n_in}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, n_in)) if x.data.ndim != 2 else x
    wt = transpose(p.weight)
    out = bias_add(matmul(flat, wt), p.bias)
    if x.data.ndim != 2:
        out = reshape(out, (*lead, p.weight.data.shape[0]))
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g.T,)

    return _make("transpose", (a,), a.data.T, bwd)


def named_parameters(tree, prefix: str = ""):
    """Yield (name, Tensor) pairs from a nested structure of params.

    Walks dataclasses, lists, tuples, and dicts (dict keys sorted for a
    stable order). Names are dotted paths, list positions as integers.
    """
    if isinstance(tree, Tensor):
        yield prefix or "param", tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            v = getattr(tree, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(v, sub)
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            sub = f"{prefix}.{i}" if prefix else str(i)
            yield from named_parameters(v, sub)
    elif isinstance(tree, dict):
        for key in sorted(tree):
            sub = f"{prefix}.{key}" if prefix else str(key)
            yield from named_parameters(tree[key], sub)
    # scalars / tags / ndarrays are not parameters


def parameters(tree) -> list[Tensor]:
    return [t for _, t in named_parameters(tree)]


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params=None) -> None:
    """Populate .grad for every requires-grad leaf feeding `loss`.

    Visits the tape's nodes in reverse execution order once. Parameters in
    `params` (an iterable of Tensors) that never reached the loss get zero
    gradients.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    # write gradients onto leaf tensors
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                if g is not None:
                    t.grad = np.array(g, dtype=t.data.dtype)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def finite_diff_check(
    f,
    params,
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a zero-argument callable returning a scalar Tensor built from
    `params` (an iterable of requires-grad Tensors). Error per element is
    |analytic - fd| / max(1, |fd|). With `sample` set, only that many
    seeded random elements per parameter are probed (for large models);
    otherwise every element is swept.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with record() as tape:
        loss = f()
    backward(tape, loss, params=params)
    analytic = [np.array(p.grad) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            probe = rng.choice(n, size=sample, replace=False)
        else:
            probe = range(n)
        for j in probe:
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f().data)
            flat[j] = orig - eps
            lo = float(f().data)
            flat[j] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(an.reshape(-1)[j] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
