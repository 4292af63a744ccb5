"""Reverse-mode differentiation over dense float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients are recorded on the active :class:`Tape` in creation order, which
is always a valid topological order, so :func:`backward` simply walks the
tape in reverse.

    >>> w = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape({"w": w}) as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)["w"]
    array([ 2., -4.])
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, DomainError, NumericError, StructuralError

DTYPE = np.float64
RNG_ALGORITHM = "numpy-pcg64/1"

_TAPES: list["Tape"] = []


class Rng:
    """Seeded random stream (PCG64). Child streams are derived by key, so
    adding a consumer never shifts the draws seen by another one."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int = 0, _key: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "Rng":
        ints = tuple(_key_to_int(k) for k in keys)
        return Rng(self.seed, self.key + ints)

    def get_state(self) -> dict:
        return {"algorithm": self.algorithm, "seed": self.seed, "key": list(self.key),
                "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise DomainError(f"rng algorithm mismatch: {state.get('algorithm')!r}")
        self.generator.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng.set_state(state)
        return rng

    # thin pass-throughs
    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def _key_to_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    # stable across runs (unlike hash())
    return int.from_bytes(str(k).encode("utf-8")[:16].ljust(16, b"\0"), "little") % (2**63)


class Tape:
    """Ordered record of differentiable operations plus the trainable set.

    Use as a context manager; only operations created while the tape is
    active are recorded.
    """

    def __init__(self, parameters=None):
        self.nodes: list[Tensor] = []
        if parameters is None:
            parameters = {}
        elif not isinstance(parameters, dict):
            parameters = {str(i): p for i, p in enumerate(parameters)}
        self.parameters: dict[str, Tensor] = parameters

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

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
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap a primitive's output; record it when any parent is tracked."""
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out)
    return out


def _accum(t: Tensor, g, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``. ``owned`` marks a fresh array nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None and owned:
        t.grad = g
    elif t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape) if np.ndim(g) else np.full(t.shape, g, dtype=DTYPE)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))
    return _make(a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * 0.5 / out))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: _accum(a, g * np.exp(a.data - out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _accum(a, g * mask))


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, negative_slope)
    return _make(a.data * slope, (a,), lambda g: _accum(a, g * slope))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    d = np.where(x > 0, 1.0, neg_part + alpha)
    return _make(out, (a,), lambda g: _accum(a, g * d))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: _accum(a, g * mask))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: _accum(a, g * s))


def stop_gradient(a) -> Tensor:
    """Same values, treated as a constant by :func:`backward`."""
    return Tensor(as_tensor(a).data)


def dropout(a, p: float, rng: Rng | None, training: bool = True) -> Tensor:
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- reductions / shapes

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: _accum(a, g.T))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return _make(out, ts, bw)


def take_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis (gather)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        if not a.requires_grad:
            return
        if a.ndim == 1:
            _accum(a, np.bincount(index, weights=g, minlength=a.shape[0]))
        else:
            acc = np.zeros(a.shape, dtype=DTYPE)
            np.add.at(acc, index, g)
            _accum(a, acc)
    return _make(a.data[index], (a,), bw)


def take_cols(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        acc = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(acc, (slice(None), index), g)
        _accum(a, acc)
    return _make(a.data[:, index], (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T, owned=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, owned=True)
    return _make(a.data @ b.data, (a, b), bw)


def row_softmax(x, temperature: float = 1.0) -> Tensor:
    """Softmax along the last axis of ``x / temperature``.

    Rows are shifted by their max before exponentiation so logits of any
    magnitude stay finite. Exactly tied maxima share the mass for every
    finite temperature; :func:`row_hardmax` is the zero-temperature limit
    with the lowest-index tie rule.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    out = x.data / temperature
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g):
        # in-place to keep N x N attention backward at two temporaries
        dot = np.einsum("...i,...i->...", g, out)[..., None]
        res = g - dot
        res *= out
        if temperature != 1.0:
            res /= temperature
        _accum(x, res, owned=True)
    return _make(out, (x,), bw)


def row_hardmax(x) -> np.ndarray:
    """One-hot of each row's argmax, ties to the lowest index."""
    data = as_tensor(x).data
    out = np.zeros_like(data)
    out[np.arange(data.shape[0]), data.argmax(axis=-1)] = 1.0
    return out


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        _accum(x, g - soft * g.sum(axis=-1, keepdims=True))
    return _make(out, (x,), bw)


def _csr(adj, values: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix((values, adj.cols, adj.indptr), shape=(adj.n, adj.n))


def sparse_dense_matmul(adj, dense, values=None) -> Tensor:
    """Row ``i`` of the result is ``sum_j w(i, j) * dense[j]`` over stored pairs.

    ``adj`` is a :class:`~vecformer.graphio.SparseAdjacency` (fixed topology).
    ``values`` optionally gives per-pair weights in the adjacency's edge order;
    it may be a tracked tensor (e.g. attention coefficients). Defaults to 1.
    """
    dense = as_tensor(dense)
    if dense.shape[0] != adj.n:
        raise DimensionError(f"adjacency has {adj.n} nodes but dense has {dense.shape[0]} rows")
    if adj.rows.size and (adj.rows.max() >= adj.n or adj.cols.max() >= adj.n or adj.cols.min() < 0):
        raise StructuralError(f"edge index out of range for n={adj.n}")
    if values is None:
        values = Tensor(np.ones(adj.rows.size))
    values = as_tensor(values)
    m = _csr(adj, values.data)
    out = m @ dense.data

    def bw(g):
        if dense.requires_grad:
            _accum(dense, m.T @ g)
        if values.requires_grad:
            if dense.ndim == 1:
                _accum(values, g[adj.rows] * dense.data[adj.cols])
            else:
                _accum(values, np.einsum("ij,ij->i", g[adj.rows], dense.data[adj.cols]))
    return _make(np.asarray(out), (dense, values), bw)


def segment_softmax(scores, segments: np.ndarray, indptr: np.ndarray) -> Tensor:
    """Softmax of a 1-D ``scores`` within contiguous segments.

    ``segments[e]`` is the segment of entry ``e`` and ``indptr`` the CSR-style
    offsets; entries must already be grouped by segment.
    """
    scores = as_tensor(scores)
    s = scores.data
    nonempty = np.flatnonzero(np.diff(indptr) > 0)
    starts = indptr[nonempty]
    seg_max = np.zeros(len(indptr) - 1)
    if s.size:
        seg_max[nonempty] = np.maximum.reduceat(s, starts)
    e = np.exp(s - seg_max[segments])
    seg_sum = np.ones(len(indptr) - 1)
    if s.size:
        seg_sum[nonempty] = np.add.reduceat(e, starts)
    out = e / seg_sum[segments]

    def bw(g):
        dot = np.zeros(len(indptr) - 1)
        if s.size:
            dot[nonempty] = np.add.reduceat(g * out, starts)
        _accum(scores, out * (g - dot[segments]))
    return _make(out, (scores,), bw)


# ---------------------------------------------------------------- backward / checks

def backward(tape: Tape, loss: Tensor) -> dict:
    """Populate and return gradients for every parameter on ``tape``.

    Parameters the loss does not depend on get an all-zero gradient.
    Intermediate gradients are released as soon as they are propagated.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    for p in tape.parameters.values():
        p.grad = None
    if loss.requires_grad:
        if loss._backward is not None and (not tape.nodes or not any(n is loss for n in reversed(tape.nodes))):
            raise ContractError("loss was not recorded on this tape")
        loss.grad = np.ones(loss.shape, dtype=DTYPE)
        for node in reversed(tape.nodes):
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            node.grad = None
    grads = {}
    for name, p in tape.parameters.items():
        grads[name] = p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)
        p.grad = grads[name]
    return grads


def grad_check(f, x, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a :class:`Tensor` to a scalar :class:`Tensor`. The error at
    each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-2:
        raise DomainError(f"eps must lie in [1e-7, 1e-2], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    return grad_check_params(lambda p: f(p["x"]), {"x": x0}, eps)


def grad_check_params(f, params: dict, eps: float = 1e-4) -> float:
    """:func:`grad_check` over a dict of arrays; ``f`` receives a dict of tensors."""
    if not 1e-7 <= eps <= 1e-2:
        raise DomainError(f"eps must lie in [1e-7, 1e-2], got {eps}")
    base = {k: np.array(as_tensor(v).data, dtype=DTYPE) for k, v in params.items()}
    tracked = {k: parameter(v) for k, v in base.items()}
    with Tape(tracked) as tape:
        loss = f(tracked)
    analytic = backward(tape, as_tensor(loss))

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            vals = []
            for step in (eps, -eps):
                flat[idx] = orig + step
                v = as_tensor(f({k: Tensor(a) for k, a in base.items()})).data.reshape(-1)[0]
                if not np.isfinite(v):
                    raise NumericError(f"non-finite value at {name}[{idx}] (step {step:+g})")
                vals.append(v)
            flat[idx] = orig
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = analytic[name].reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def glorot_uniform(fan_in: int, fan_out: int, rng: Rng, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_in, fan_out))
