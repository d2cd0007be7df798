"""Dense tensors with tape-based reverse-mode differentiation.

Every kernel that sees an input with ``requires_grad`` appends a node to the
thread-local tape. :func:`backward` walks the tape in reverse insertion order,
once, then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "zeros",
    "backward",
    "no_grad",
    "set_precision",
    "get_dtype",
    "precision",
    "finite_diff_check",
]

_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def _local():
    if not hasattr(_state, "graph"):
        _state.graph = Graph()
        _state.grad_enabled = True
        _state.bits = 32
    return _state


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for tensors created from now on."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _local().bits = bits


def get_dtype():
    return _DTYPES[_local().bits]


@contextlib.contextmanager
def precision(bits: int):
    old = _local().bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    st = _local()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    nodes: list = field(default_factory=list)
    epoch: int = 0

    def record(self, node: _Node) -> None:
        node.output._epoch = self.epoch
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []
        self.epoch += 1


def current_graph() -> Graph:
    return _local().graph


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_epoch", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._epoch = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def _make(op: str, out: np.ndarray, inputs: tuple, bwd) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    st = _local()
    needs = st.grad_enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs, dtype=out.dtype)
    if needs:
        st.graph.record(_Node(op, inputs, res, bwd))
    return res


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make("mul", ad * bd, (a, b),
                 lambda g: (g * bd if need_a else None, g * ad if need_b else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make("add_scalar", a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the only broadcasting kernel."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each row x[..., :] by the scalar w[...]."""
    if x.shape[:-1] != w.shape:
        raise ShapeError(f"scale_rows: weights {w.shape} vs rows {x.shape[:-1]}")
    xd, wd = x.data, w.data[..., None]
    need_w = w.requires_grad
    return _make("scale_rows", xd * wd, (x, w),
                 lambda g: (g * wd, (g * xd).sum(axis=-1) if need_w else None))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., n, k] @ b[..., k, m] with equal batch dims, or b[k, m] shared."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    shared = b.ndim == 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if need_a else None
        gb = None
        if need_b:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bwd)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make("silu", xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` False entries get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: scale/shift must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    wd = weight.data
    axes = tuple(range(x.ndim - 1))

    need_x, need_p = x.requires_grad, weight.requires_grad or bias.requires_grad

    def bwd(g):
        gx = gw = gb = None
        if need_x:
            gh = g * wd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if need_p:
            gw, gb = (g * xhat).sum(axis=axes), g.sum(axis=axes)
        return gx, gw, gb

    return _make("layer_norm", xhat * wd + bias.data, (x, weight, bias), bwd)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("embedding: token id out of range")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding", weight.data[ids], (weight,), bwd)


def cross_entropy(logits: Tensor, targets, mask=None, normalizer: float | None = None) -> Tensor:
    """Token-level NLL summed over unmasked positions, divided by their count.

    ``normalizer`` replaces the count (used for gradient accumulation).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    m = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = float(m.sum()) if normalizer is None else float(normalizer)
    if count <= 0:
        raise ValueError("cross_entropy: empty mask")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    logp = z - lse
    tl = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = m.astype(z.dtype) / z.dtype.type(count)
    loss = -(tl * w).sum()

    def bwd(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w * g)[..., None],)

    return _make("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bwd)


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), bwd)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, indices, axis: int = 0, unique: bool = False) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate grads.

    ``unique=True`` promises distinct indices and skips the accumulation path.
    """
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def bwd(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        if unique:
            moved[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make("take", np.take(x.data, idx, axis=axis), (x,), bwd)


def scatter_rows(src: Tensor, index, n_rows: int, unique: bool = False) -> Tensor:
    """out[n_rows, ...] = 0; out[index[j]] += src[j]."""
    idx = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    if unique:
        out[idx] = src.data
    else:
        np.add.at(out, idx, src.data)
    return _make("scatter_rows", out, (src,), lambda g: (g[idx],))


def take_along_last(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        rows = np.indices(idx.shape)[:-1]
        np.add.at(gx, (*rows, idx), g)
        return (gx,)

    return _make("take_along_last", np.take_along_axis(x.data, idx, axis=-1), (x,), bwd)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` and clear the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = current_graph()
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss._epoch != graph.epoch:
        raise GraphError("graph already consumed; rerun the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    try:
        for node in reversed(graph.nodes):
            produced.add(id(node.output))
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not (isinstance(inp, Tensor) and inp.requires_grad):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for node in graph.nodes:
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {leaf.name or leaf}")
            g = g.astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    finally:
        graph.clear()


# ---------------------------------------------------------------- verification


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    n_samples: int | None = 8,
    seed: int = 0,
    reference_bits: int | None = None,
    order: int = 2,
    metric: str = "elementwise",
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` reads the current values of ``params``. Up to ``n_samples``
    coordinates per parameter are checked (all when None). With
    ``reference_bits`` the numeric side is evaluated at that precision while
    the analytic gradient keeps the current one. ``order=4`` swaps the
    two-point central difference for the five-point central stencil.

    ``metric="elementwise"`` scores each coordinate by |a - n| / max(|a|, |n|);
    ``metric="tensor"`` scores each parameter by ||a - n|| / max(||a||, ||n||)
    over its checked coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if metric not in ("elementwise", "tensor"):
        raise ValueError("metric must be 'elementwise' or 'tensor'")
    params = list(params)
    for p in params:
        p.grad = None
    current_graph().clear()
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    originals = [p.data for p in params]
    bits = reference_bits or _local().bits
    if reference_bits:
        for p in params:
            p.data = p.data.astype(_DTYPES[reference_bits])

    def f() -> float:
        with no_grad():
            return loss_fn().data.item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with precision(bits):
            base = f()
            if f() != base:
                raise GraphError("loss_fn is not deterministic")
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                n = flat.size
                coords = np.arange(n) if n_samples is None or n_samples >= n else rng.choice(n, n_samples, replace=False)
                an_vals, num_vals = [], []
                for c in coords:
                    orig = flat[c]

                    def at(delta):
                        flat[c] = orig + delta
                        return f()

                    try:
                        if order == 2:
                            num = (at(eps) - at(-eps)) / (2 * eps)
                        else:
                            num = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                    finally:
                        flat[c] = orig
                    an_vals.append(float(ga.reshape(-1)[c]))
                    num_vals.append(num)
                a_arr, n_arr = np.array(an_vals), np.array(num_vals)
                if metric == "elementwise":
                    err = np.abs(a_arr - n_arr) / np.maximum(np.maximum(np.abs(a_arr), np.abs(n_arr)), 1e-8)
                    worst = max(worst, float(err.max(initial=0.0)))
                else:
                    den = max(np.linalg.norm(a_arr), np.linalg.norm(n_arr), 1e-8)
                    worst = max(worst, float(np.linalg.norm(a_arr - n_arr) / den))
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return worst
