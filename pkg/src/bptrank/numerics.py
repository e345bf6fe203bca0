"""Dense tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active and
at least one input requires a gradient, the op appends a node holding a
closure that maps the output gradient to input gradients. :func:`backward`
replays the tape in reverse.

Outputs are checked for NaN/Inf; a non-finite value raises
:class:`~bptrank.errors.NonFiniteError` immediately.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateVectorError,
    DeterminismError,
    DimensionError,
    NonFiniteError,
)

_DTYPES = {"f32": np.float32, "f64": np.float64}


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = _DTYPES[dtype]
        except KeyError:
            raise DimensionError(f"unsupported dtype {dtype!r}") from None
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise DimensionError(f"unsupported dtype {dtype}")
    return dtype


class Tensor:
    """Row-major float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        arr = np.ascontiguousarray(arr, dtype=as_dtype(dtype))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable
    # set by checkpoint: accumulates straight into the outer gradient map
    backward_into: Callable | None = None


class Tape:
    """Ordered record of differentiable ops executed while active.

    ``saved_elements`` counts the elements of every recorded output; it is a
    proxy for the activation memory the tape keeps alive until backward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.saved_elements = 0

    def _push(self, node):
        self.nodes.append(node)
        self.saved_elements += node.output.size

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape():
    st = _stack()
    return st[-1] if st else None


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced a non-finite value")


def _emit(out_data, inputs, backward_fn, opname):
    _check_finite(out_data, opname)
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._push(_Node(tuple(inputs), out, backward_fn))
    return out


def _same_dtype(a, b, opname):
    if a.dtype != b.dtype:
        raise DimensionError(f"{opname}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b, opname):
    if isinstance(a, Tensor):
        b = _wrap(b, like=a)
    else:
        a = _wrap(a, like=b)
    _same_dtype(a, b, opname)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


def add(a, b):
    a, b = _binary_operands(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    out = a.data / b.data

    def bwd(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit(out, (a, b), bwd, "div")


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _emit(out, (x,), bwd, "exp")


def log(x):
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")

    def bwd(g):
        return (g / x.data,)

    return _emit(np.log(x.data), (x,), bwd, "log")


def sqrt(x):
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _emit(out, (x,), bwd, "sqrt")


def relu(x):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    pos = x.data > 0

    def bwd(g):
        return (g * pos,)

    return _emit(np.where(pos, x.data, 0).astype(x.dtype), (x,), bwd, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(out.astype(x.dtype, copy=False), (x,), bwd, "gelu")


# -------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    _same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for x of shape (..., n_in) and a 2-D weight."""
    _same_dtype(x, weight, "linear")
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} for weight {weight.shape}")
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit(out, inputs, bwd, "linear")


# ------------------------------------------------------------------ reductions


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out, dtype=x.dtype), (x,), bwd, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


# ----------------------------------------------------------------- shape ops


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: {x.shape} -> {shape}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), bwd, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bwd, "transpose")


def getitem(x, index):
    """Basic (slice/integer) indexing."""
    out = np.ascontiguousarray(x.data[index])

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(out, (x,), bwd, "getitem")


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    for t in tensors[1:]:
        _same_dtype(tensors[0], t, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(tensors), bwd, "concat")


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding: id out of range")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), bwd, "embedding")


# ------------------------------------------------------------ normalizations


def stable_softmax(x, axis=-1):
    """Softmax with max-subtraction along ``axis``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit(out, (x,), bwd, "softmax")


def log_softmax(x, axis=-1):
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _emit(out, (x,), bwd, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps < 0:
        raise ContractError("layer_norm: eps must be non-negative")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0):
        # zero variance with eps == 0: the normalized value is 0 by convention
        denom = np.where(denom <= 0, 1, denom)
    inv = 1.0 / np.sqrt(denom)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "layer_norm")


def l2_normalize(x, axis=-1):
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    out = x.data / norm

    def bwd(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _emit(out, (x,), bwd, "l2_normalize")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy: target class out of range")
    lsm = log_softmax(logits, axis=1)
    picked = getitem(lsm, (np.arange(len(targets)), targets))
    return mul(mean(picked), -1.0)


def cosine_similarity(u, v) -> float:
    """u.v / (|u| |v|) for two plain vectors."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).ravel()
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: lengths {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    return matmul(l2_normalize(a, axis=-1), transpose(l2_normalize(b, axis=-1)))


# ------------------------------------------------------------ checkpointing


def checkpoint(fn, *inputs):
    """Run ``fn(*inputs)`` without keeping its intermediates on the tape.

    The backward pass re-executes ``fn`` on a private tape and differentiates
    that replay, so the outer tape stores only the output.
    """
    with no_grad():
        out = fn(*inputs)
    if not isinstance(out, Tensor):
        raise ContractError("checkpointed function must return a single Tensor")

    def bwd_into(g, outer):
        # The replay continues from the outer running sums so that every
        # gradient is accumulated in the same order as without recompute.
        leaves = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        with Tape() as sub_tape:
            replay = fn(*leaves)
        grads = Gradients()
        for leaf, t in zip(leaves, inputs):
            prev = outer.get(t)
            if leaf.requires_grad and prev is not None:
                grads._grads[id(leaf)] = (leaf, prev)
        _sweep(sub_tape, replay, g, grads)
        for leaf, t in zip(leaves, inputs):
            if t.requires_grad and leaf in grads:
                outer._grads[id(t)] = (t, grads.get(leaf))

    def bwd(g):
        grads = Gradients()
        bwd_into(g, grads)
        return tuple(grads.get(t) if t.requires_grad else None for t in inputs)

    out = _emit(out.data, inputs, bwd, "checkpoint")
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.nodes[-1].backward_into = bwd_into
    return out


# ------------------------------------------------------------------ backward


class Gradients:
    """Gradient map keyed by tensor identity; unreachable tensors map to zeros."""

    def __init__(self):
        self._grads = {}

    def _accumulate(self, tensor, grad):
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = (tensor, self._grads[key][1] + grad)
        else:
            self._grads[key] = (tensor, np.array(grad, dtype=tensor.dtype, copy=True))

    def get(self, tensor):
        entry = self._grads.get(id(tensor))
        return None if entry is None else entry[1]

    def __getitem__(self, tensor):
        entry = self._grads.get(id(tensor))
        return np.zeros_like(tensor.data) if entry is None else entry[1]

    def __contains__(self, tensor):
        return id(tensor) in self._grads


def backward(tape: Tape, loss: Tensor, seed=None) -> Gradients:
    """Reverse-mode sweep over ``tape`` starting from ``loss``.

    ``seed`` supplies the upstream gradient for a non-scalar output; without it
    the loss must be a scalar.
    """
    if seed is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    elif np.shape(seed) != loss.shape:
        raise DimensionError(f"seed shape {np.shape(seed)} does not match {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    _sweep(tape, loss, np.asarray(seed, dtype=loss.dtype), grads)
    return grads


def _sweep(tape, loss, seed, grads):
    grads._accumulate(loss, seed)
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        if node.backward_into is not None:
            node.backward_into(g, grads)
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is not None and t.requires_grad:
                grads._accumulate(t, gi)


# --------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    passed: bool = True
    eps: float = 1e-5
    tolerance: float = 1e-4

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_probes: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    ``f`` is re-evaluated with each probed entry of each parameter shifted by
    ``+eps`` and ``-eps``. ``max_probes`` limits the number of entries probed
    per parameter (chosen with a seeded generator); ``None`` probes all.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    params = list(params)

    def value():
        with no_grad():
            return float(np.asarray(f().data, dtype=np.float64).reshape(()))

    if value() != value():
        raise DeterminismError("f returned different values for identical parameters")

    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps, tolerance=tol)
    for i, p in enumerate(params):
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        worst = 0.0
        original = p.data
        for j in idx:
            bumped = original.copy().reshape(-1)
            bumped[j] = flat[j] + eps
            p.data = bumped.reshape(original.shape)
            f_plus = value()
            bumped[j] = flat[j] - eps
            p.data = bumped.reshape(original.shape)
            f_minus = value()
            p.data = original
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, rel_error(float(analytic[j]), numeric))
        report.max_rel_error[p.name or f"param{i}"] = worst
    report.passed = report.worst < tol
    return report
