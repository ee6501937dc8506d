"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (encoders, attention, memory, heads, losses) is
composed from the kernels in this module.  A forward pass records onto the
innermost active :class:`Tape`; with no active tape, kernels run forward
only, which is what evaluation paths use.

Conventions:

* tensors are 0-d (scalars), 1-d (vectors) or 2-d (matrices) of float64,
* op outputs are treated as immutable; only leaf tensors (parameters,
  inputs) may be rewritten in place between tapes,
* gradients accumulate into ``Tensor.grad`` for tape leaves when
  ``Tape.backward`` runs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


_TLS = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every kernel (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``node_id`` mirrors the tensor's identifier in the tape that most
    recently recorded it; the authoritative id lives on the tape itself.
    """

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's buffer (no tape history)."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data, copy=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of operations for one reverse sweep.

    Entries are appended in execution order, so the list is topologically
    sorted by construction: an op's inputs are always registered before the
    op itself.  ``backward`` walks the list once, in reverse.

    Tapes nest: entering a tape pushes it onto a thread-local stack and
    kernels record onto the innermost one.  A tape is single-threaded;
    independent tapes may run concurrently over shared read-only leaves.
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple[int, ...], Callable]] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._produced: set[int] = set()

    # -- context management ------------------------------------------------

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover
            raise RuntimeError("tape stack corrupted")

    # -- recording ---------------------------------------------------------

    def node_id_of(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(t)] = nid
            self._tensors.append(t)
            t.node_id = nid
        return nid

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        """Append one op.  ``backward(gout)`` must return one gradient
        array (or None) per input, in order."""
        in_ids = tuple(self.node_id_of(t) for t in inputs)
        out_id = self.node_id_of(out)
        self._produced.add(out_id)
        self._entries.append((out_id, in_ids, backward))

    @property
    def num_ops(self) -> int:
        return len(self._entries)

    def is_leaf(self, t: Tensor) -> bool:
        nid = self._ids.get(id(t))
        return nid is not None and nid not in self._produced

    # -- reverse sweep -------------------------------------------------------

    def backward(self, loss: Tensor) -> int:
        """Accumulate d(loss)/d(leaf) into each leaf's ``grad``.

        Returns the number of nodes visited; every node with a gradient is
        visited exactly once.
        """
        if loss.data.shape != ():
            raise ShapeError("backward requires a scalar loss")
        if not np.isfinite(loss.data):
            raise NonFiniteError("loss is not finite")
        loss_id = self._ids.get(id(loss))
        if loss_id is None:
            raise ValueError("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {loss_id: np.ones((), dtype=np.float64)}
        visited = 0
        for out_id, in_ids, fn in reversed(self._entries):
            gout = grads.pop(out_id, None)
            if gout is None:
                continue
            visited += 1
            gins = fn(gout)
            for nid, gin in zip(in_ids, gins):
                if gin is None:
                    continue
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = gin
                else:
                    acc = acc + gin
                    grads[nid] = acc
        # whatever is left belongs to leaves
        for nid, g in grads.items():
            t = self._tensors[nid]
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + g
        return visited


def _finite_check(name: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    _finite_check(name, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


# -- constructors ------------------------------------------------------------


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def scalar(value: float) -> Tensor:
    return Tensor(np.float64(value))


# -- elementwise and linear kernels ------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise |a - b|; subgradient 0 at ties."""
    _same_shape(a, b, "abs_diff")
    diff = a.data - b.data
    sign = np.sign(diff)
    return _make("abs_diff", np.abs(diff), (a, b), lambda g: (g * sign, -g * sign))


def gate_blend(z: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """(1 - z) * a + z * b, the gated update used by recurrent cells."""
    _same_shape(z, a, "gate_blend")
    _same_shape(z, b, "gate_blend")
    zd, ad, bd = z.data, a.data, b.data
    out = (1.0 - zd) * ad + zd * bd
    return _make("gate_blend", out, (z, a, b), lambda g: (g * (bd - ad), g * (1.0 - zd), g * zd))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) via logaddexp; gradient is sigmoid(x)."""
    ad = a.data
    y = np.logaddexp(0.0, ad)

    def bwd(g):
        s = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-ad)), np.exp(ad) / (1.0 + np.exp(ad)))
        return (g * s,)

    return _make("softplus", y, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,n)@(n,) -> (m,) or (m,n)@(n,p) -> (m,p)."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = ad @ bd

    if bd.ndim == 1:
        def bwd(g):
            return (np.outer(g, bd), ad.T @ g)
    else:
        def bwd(g):
            return (g @ bd.T, ad.T @ g)

    return _make("matmul", out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def outer(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("outer expects two vectors")
    ud, vd = u.data, v.data
    return _make("outer", np.outer(ud, vd), (u, v), lambda g: (g @ vd, g.T @ ud))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("dot expects two vectors")
    _same_shape(a, b, "dot")
    ad, bd = a.data, b.data
    return _make("dot", np.float64(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """W @ x + b for a vector or column-batched x.

    b is a vector; for a matrix x it is added to every column.
    """
    wd, xd, bd = w.data, x.data, b.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[0] != bd.shape[0]:
        raise ShapeError(f"affine: W {wd.shape} and b {bd.shape} do not conform")
    if xd.ndim == 1:
        if wd.shape[1] != xd.shape[0]:
            raise ShapeError(f"affine: W {wd.shape} and x {xd.shape} do not conform")
        out = wd @ xd + bd

        def bwd(g):
            return (np.outer(g, xd), wd.T @ g, g)
    elif xd.ndim == 2:
        if wd.shape[1] != xd.shape[0]:
            raise ShapeError(f"affine: W {wd.shape} and x {xd.shape} do not conform")
        out = wd @ xd + bd[:, None]

        def bwd(g):
            return (g @ xd.T, wd.T @ g, g.sum(axis=1))
    else:
        raise ShapeError("affine: x must be a vector or matrix")
    return _make("affine", out, (w, x, b), bwd)


# -- shape manipulation -------------------------------------------------------


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate vectors end to end, or matrices along rows."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of empty list")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise ShapeError("concat: mixed ranks")
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make("concat", out, parts, bwd)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along columns."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("hstack expects matrices")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _make("hstack", out, parts, bwd)


def stack_cols(vectors: Sequence[Tensor]) -> Tensor:
    """Stack n vectors of length d into a (d, n) matrix."""
    vectors = list(vectors)
    if not vectors or any(v.data.ndim != 1 for v in vectors):
        raise ShapeError("stack_cols expects vectors")
    out = np.stack([v.data for v in vectors], axis=1)

    def bwd(g):
        return tuple(g[:, j] for j in range(len(vectors)))

    return _make("stack_cols", out, vectors, bwd)


def col(a: Tensor, j: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("col expects a matrix")
    m, n = a.data.shape
    out = a.data[:, j].copy()

    def bwd(g):
        full = np.zeros((m, n))
        full[:, j] = g
        return (full,)

    return _make("col", out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a matrix")
    m, n = a.data.shape
    out = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros((m, n))
        full[:, start:stop] = g
        return (full,)

    return _make("slice_cols", out, (a,), bwd)


def tile_cols(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as n identical columns."""
    if v.data.ndim != 1:
        raise ShapeError("tile_cols expects a vector")
    out = np.repeat(v.data[:, None], n, axis=1)
    return _make("tile_cols", out, (v,), lambda g: (g.sum(axis=1),))


def repeat_cols(a: Tensor, times: int) -> Tensor:
    """Repeat each column of a matrix `times` times consecutively."""
    if a.data.ndim != 2:
        raise ShapeError("repeat_cols expects a matrix")
    m, n = a.data.shape
    out = np.repeat(a.data, times, axis=1)

    def bwd(g):
        return (g.reshape(m, n, times).sum(axis=2),)

    return _make("repeat_cols", out, (a,), bwd)


def as_matrix(v: Tensor, rows: int, cols: int) -> Tensor:
    """Reshape a vector of length rows*cols into (rows, cols), row-major."""
    if v.data.ndim != 1 or v.data.size != rows * cols:
        raise ShapeError("as_matrix: size mismatch")
    out = v.data.reshape(rows, cols).copy()
    return _make("as_matrix", out, (v,), lambda g: (g.reshape(-1),))


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack n scalar tensors into a length-n vector."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 0 for p in parts):
        raise ShapeError("stack_scalars expects scalar tensors")
    out = np.array([float(p.data) for p in parts])

    def bwd(g):
        return tuple(np.float64(g[i]) for i in range(len(parts)))

    return _make("stack_scalars", out, parts, bwd)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise ValueError("reciprocal of zero")
    y = 1.0 / a.data
    return _make("reciprocal", y, (a,), lambda g: (-g * y * y,))


def pick(v: Tensor, index: int) -> Tensor:
    """Select one entry of a vector as a scalar."""
    if v.data.ndim != 1:
        raise ShapeError("pick expects a vector")
    n = v.data.shape[0]
    out = np.float64(v.data[index])

    def bwd(g):
        full = np.zeros(n)
        full[index] = g
        return (full,)

    return _make("pick", out, (v,), bwd)


# -- reductions and losses -----------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make("sum_all", np.float64(a.data.sum()), (a,), lambda g: (np.full(shape, g),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    return _make("mean_all", np.float64(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def sq_err_sum(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences."""
    _same_shape(a, b, "sq_err_sum")
    diff = a.data - b.data
    return _make("sq_err_sum", np.float64((diff * diff).sum()), (a, b),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    return _make("mse", np.float64((diff * diff).sum() / n), (a, b),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def binary_cross_entropy(p: Tensor, target: Tensor) -> Tensor:
    """Mean of -(t log p + (1-t) log(1-p)); p must lie strictly in (0,1)."""
    _same_shape(p, target, "binary_cross_entropy")
    pd, td = p.data, target.data
    if np.any(pd <= 0.0) or np.any(pd >= 1.0):
        raise ValueError("binary_cross_entropy: probabilities must be in (0,1)")
    n = pd.size
    val = np.float64(-(td * np.log(pd) + (1.0 - td) * np.log1p(-pd)).sum() / n)

    def bwd(g):
        return (g * (pd - td) / (pd * (1.0 - pd)) / n, None)

    return _make("binary_cross_entropy", val, (p, target), bwd)


def softmax(v: Tensor) -> Tensor:
    """Stable softmax of a vector (max subtraction before exponentiation)."""
    if v.data.ndim != 1:
        raise ShapeError("softmax expects a vector")
    if v.data.size == 0:
        raise ValueError("softmax of empty vector")
    if not np.all(np.isfinite(v.data)):
        raise NonFiniteError("softmax of non-finite input")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def bwd(g):
        return (y * (g - float(g @ y)),)

    return _make("softmax", y, (v,), bwd)


def softmax_cols(a: Tensor) -> Tensor:
    """Column-wise stable softmax of a matrix."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_cols expects a matrix")
    if a.data.shape[0] == 0:
        raise ValueError("softmax_cols of empty columns")
    shifted = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return _make("softmax_cols", y, (a,), bwd)


def pool_blocks(a: Tensor, w: Tensor) -> Tensor:
    """Weighted pooling of block-structured columns.

    a has shape (d, k*n) with column k*n-order (k major, block index minor);
    w has shape (k, n).  Output column j is sum_k w[k, j] * a[:, k*n + j].
    """
    ad, wd = a.data, w.data
    if ad.ndim != 2 or wd.ndim != 2:
        raise ShapeError("pool_blocks expects matrices")
    k, n = wd.shape
    d = ad.shape[0]
    if ad.shape[1] != k * n:
        raise ShapeError(f"pool_blocks: {ad.shape} incompatible with weights {wd.shape}")
    a3 = ad.reshape(d, k, n)
    out = np.einsum("dkn,kn->dn", a3, wd)

    def bwd(g):
        ga = np.einsum("dn,kn->dkn", g, wd).reshape(d, k * n)
        gw = np.einsum("dkn,dn->kn", a3, g)
        return (ga, gw)

    return _make("pool_blocks", out, (a, w), bwd)


# -- gradient checking ---------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar computation against central
    differences.

    ``f`` must be deterministic and re-read each parameter's current data on
    every call.  Returns max over all parameter entries of
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f()
    if loss.data.shape != ():
        raise ShapeError("grad_check requires a scalar-valued computation")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is not finite")
    for p in params:
        p.grad = None
    tape.backward(loss)
    analytic = [np.zeros(p.data.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = np.asarray(ana).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("non-finite loss during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
