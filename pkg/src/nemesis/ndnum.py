"""Dense tensors with reverse-mode automatic differentiation.

The kernel is deliberately small: 1-d and 2-d float arrays, no general
broadcasting (only the row-wise affine helpers ``add_row``/``mul_row`` and
the scalar gate product ``scalar_mul``), and a central-difference gradient
oracle used to check every op.

Every op output is checked for NaN/Inf and raises :class:`NumericError`
instead of carrying a poisoned value forward.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, NumericError, ParameterError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents (inference only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = np.float64
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 2:
        raise DimensionError(f"tensors are 1-d or 2-d, got shape {arr.shape}")
    return arr


class Tensor:
    """Immutable array value plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.size == 0 or any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor leaf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(float(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self, params=None):
        return backward(self, params)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.parents = parents if track else ()
    out.backward_fn = backward_fn if track else None
    return out


def _check_2d(x: Tensor, name: str):
    if x.data.ndim != 2:
        raise DimensionError(f"{name} expects a 2-d tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back, "matmul")


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose")
    return _make(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def rsub(c: float, x: Tensor) -> Tensor:
    """``c - x`` for a python constant ``c``."""
    c = x.data.dtype.type(c)
    return _make(c - x.data, (x,), lambda g: (-g,), "rsub")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi from erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)

    def back(g):
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), back, "gelu")


# -- row-wise affine (the only broadcasting in the kernel) ---------------------


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape [d] added to every row of ``x`` [n x d]."""
    _check_2d(x, "add_row")
    if b.shape != (x.shape[1],):
        raise DimensionError(f"add_row: bias shape {b.shape} vs rows of width {x.shape[1]}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_row")


def mul_row(x: Tensor, w: Tensor) -> Tensor:
    _check_2d(x, "mul_row")
    if w.shape != (x.shape[1],):
        raise DimensionError(f"mul_row: weight shape {w.shape} vs rows of width {x.shape[1]}")
    xd, wd = x.data, w.data
    return _make(xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=0)), "mul_row")


def scalar_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``s``."""
    if s.data.size != 1:
        raise DimensionError(f"scalar_mul: expected a 1-element tensor, got {s.shape}")
    xd, sv = x.data, s.data.reshape(-1)[0]

    def back(g):
        return g * sv, np.array([(g * xd).sum()], dtype=s.data.dtype).reshape(s.shape)

    return _make(xd * sv, (x, s), back, "scalar_mul")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a [d] or [1 x d] tensor into [n x d]."""
    row = x.data.reshape(1, -1)
    shape = x.shape

    def back(g):
        return (g.sum(axis=0).reshape(shape),)

    return _make(np.repeat(row, n, axis=0), (x,), back, "repeat_rows")


# -- reductions ----------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0], dtype=x.dtype),),
                 "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of [n x d], shape [d]."""
    _check_2d(x, "mean_rows")
    n = x.shape[0]
    return _make(x.data.mean(axis=0), (x,), lambda g: (np.repeat(g[None, :] / n, n, axis=0),),
                 "mean_rows")


# -- normalizers -----------------------------------------------------------------


def softmax_rows(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Row softmax, stabilized by subtracting the row max.

    ``bias`` is an optional constant additive mask; ``-inf`` entries get
    exactly zero weight. Every row needs at least one finite entry.
    """
    _check_2d(x, "softmax_rows")
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), back, "softmax_rows")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_2d(x, "layernorm")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layernorm")


# -- structural --------------------------------------------------------------------


def concat_cols(parts: list[Tensor]) -> Tensor:
    for p in parts:
        _check_2d(p, "concat_cols")
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat_cols: row counts differ")
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, widths, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back,
                 "concat_cols")


def concat_rows(parts: list[Tensor]) -> Tensor:
    for p in parts:
        _check_2d(p, "concat_rows")
    if len({p.shape[1] for p in parts}) != 1:
        raise DimensionError("concat_rows: widths differ")
    heights = np.cumsum([p.shape[0] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, heights, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back,
                 "concat_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x, "slice_cols")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for width {x.shape[1]}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), back, "slice_cols")


def take_rows(x: Tensor, idx) -> Tensor:
    _check_2d(x, "take_rows")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("take_rows: need a non-empty 1-d index list")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise DimensionError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back, "take_rows")


def scatter_rows(n: int, pieces: list[tuple]) -> Tensor:
    """Assemble an [n x d] tensor from ``(row_indices, tensor)`` pieces.

    Every output row must be written by exactly one piece.
    """
    if not pieces:
        raise DimensionError("scatter_rows: no pieces")
    width = pieces[0][1].shape[1]
    index_lists = [np.asarray(i, dtype=np.intp) for i, _ in pieces]
    cover = np.zeros(n, dtype=np.int64)
    for idx, (_, t) in zip(index_lists, pieces):
        _check_2d(t, "scatter_rows")
        if t.shape != (idx.size, width):
            raise DimensionError(f"scatter_rows: piece {t.shape} vs {idx.size} rows of width {width}")
        np.add.at(cover, idx, 1)
    if not (cover == 1).all():
        raise DimensionError("scatter_rows: rows must be covered exactly once")
    out = np.empty((n, width), dtype=pieces[0][1].data.dtype)
    for idx, (_, t) in zip(index_lists, pieces):
        out[idx] = t.data

    def back(g):
        return tuple(g[idx] for idx in index_lists)

    return _make(out, tuple(t for _, t in pieces), back, "scatter_rows")


# -- reverse mode ------------------------------------------------------------------


@dataclass
class Tape:
    """Graph nodes reachable from an output, parents before children."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, visited = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list:
        return [n for n in self.nodes if not n.parents and n.requires_grad]


def backward(loss: Tensor, params=None) -> list:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaves in ``params`` that the loss does not depend on get a zero
    gradient. Gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    touched = []
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node.grad = g
                touched.append(node)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        seen = {id(t) for t in touched}
        for p in _param_list(params):
            if id(p) not in seen:
                p.grad = np.zeros(p.shape, dtype=p.dtype)
    return touched


def _param_list(params) -> list:
    if isinstance(params, dict):
        return list(params.values())
    if hasattr(params, "tensors"):
        return list(params.tensors.values())
    return list(params)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    if hasattr(params, "tensors"):
        return list(params.tensors.items())
    return [(str(i), p) for i, p in enumerate(params)]


def finite_diff_report(f, params, step: float = 1e-3, max_coords: int | None = None,
                       seed: int = 0, floor: float = 1e-6) -> dict:
    """Per-tensor max relative error between backward() and central differences.

    ``f`` is a zero-argument callable rebuilding the scalar loss from the
    current values of ``params``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` set, a seeded
    random subset of that many coordinates is checked per tensor.
    """
    if step <= 0:
        raise ParameterError("finite-difference step must be positive")
    named = _named(params)
    loss = f()
    backward(loss, [p for _, p in named])
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in named:
        analytic = p.grad.reshape(-1)
        size = p.data.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        base = p.data
        worst = 0.0
        for i in coords:
            bumped = base.copy()
            bumped.flat[i] += step
            p.data = bumped
            fp = f().item()
            bumped = base.copy()
            bumped.flat[i] -= step
            p.data = bumped
            fm = f().item()
            p.data = base
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(f, params, step: float = 1e-3, max_coords: int | None = None,
                      seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative gradient error over all checked coordinates."""
    report = finite_diff_report(f, params, step, max_coords, seed, floor)
    return max(report.values()) if report else 0.0
