"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every op records its parents and per-parent VJP closures on the output
tensor; ``backward`` replays a topologically ordered tape in reverse and
adds this pass's gradient into ``.grad`` of every reachable tensor that
requires grad (so gradients accumulate across backward calls).

Only the operations the world model needs are provided. No GPU, no
higher-order derivatives, no mixed precision.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """n-d float64 array with an accumulated gradient of the same shape."""

    __slots__ = ("data", "_grad", "requires_grad", "node_id", "_parents", "_vjps", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Optional[Callable], ...] = ()
        self.op = "leaf"

    # -- gradient bookkeeping -------------------------------------------------

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(
                f"grad shape {value.shape} does not match data shape {self.data.shape}"
            )
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    # -- convenience ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------------

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def parameter(data) -> Tensor:
    """A leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjps: Sequence[Optional[Callable]],
    op: str,
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# binary elementwise ops
# ---------------------------------------------------------------------------


def _binary(a, b, fn, vjp_a, vjp_b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from exc
    return _from_op(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(vjp_a(g, a.data, b.data), a.shape),
            lambda g: _unbroadcast(vjp_b(g, a.data, b.data), b.shape),
        ),
        op,
    )


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    b_t = as_tensor(b)
    if np.any(b_t.data == 0.0):
        raise NumericError("div: denominator contains zero")
    return _binary(
        a,
        b_t,
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


# ---------------------------------------------------------------------------
# unary elementwise ops
# ---------------------------------------------------------------------------


def _unary(x, data, vjp, op):
    x = as_tensor(x)
    return _from_op(data, (x,), (vjp,), op)


def _domain_check(x: np.ndarray, ok: np.ndarray, op: str) -> None:
    if not ok.all():
        idx = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise NumericError(f"{op}: domain violation at index {idx}")


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return _unary(x, e, lambda g: g * e, "exp")


def log(x):
    x = as_tensor(x)
    _domain_check(x.data, x.data > 0.0, "log")
    return _unary(x, np.log(x.data), lambda g: g / x.data, "log")


def square(x):
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda g: g * 2.0 * x.data, "square")


def sqrt(x):
    x = as_tensor(x)
    _domain_check(x.data, x.data >= 0.0, "sqrt")
    r = np.sqrt(x.data)
    return _unary(x, r, lambda g: g * 0.5 / r, "sqrt")


def softplus(x):
    x = as_tensor(x)
    return _unary(x, np.logaddexp(0.0, x.data), lambda g: g * expit(x.data), "softplus")


def gelu(x):
    x = as_tensor(x)
    out, cdf = kernels.gelu_forward(x.data)
    return _unary(x, out, lambda g: kernels.gelu_backward(x.data, cdf, g), "gelu")


def clamp(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero strictly outside the interval."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda g: g * inside, "clamp")


def negate(x):
    x = as_tensor(x)
    return _unary(x, -x.data, lambda g: -g, "negate")


def scale(x, c: float):
    x = as_tensor(x)
    return _unary(x, x.data * c, lambda g: g * c, "scale")


def mask_log(x):
    """Elementwise log with log(0) = -inf; zero entries get zero gradient."""
    x = as_tensor(x)
    _domain_check(x.data, x.data >= 0.0, "mask_log")
    pos = x.data > 0.0
    data = np.where(pos, np.log(np.where(pos, x.data, 1.0)), -np.inf)
    return _unary(x, data, lambda g: np.where(pos, g / np.where(pos, x.data, 1.0), 0.0), "mask_log")


def masked_fill(x, mask: np.ndarray, value: float):
    """Overwrite positions where `mask` is True with a constant value.

    Filled positions are constants: their gradient contribution is zero.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        mask = np.broadcast_to(mask, x.shape)
    data = np.where(mask, value, x.data)
    return _unary(x, data, lambda g: np.where(mask, 0.0, g), "masked_fill")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(old), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _unary(x, np.transpose(x.data, axes), lambda g: np.transpose(g, inv), "transpose")


def gather_rows(table, idx):
    """Select rows of a 2-D table by integer index array; backward scatters."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got {table.shape}")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    data = table.data[idx]
    rows, cols = table.shape
    flat = idx.ravel()
    # scatter-add as a GEMM against a one-hot selector (np.add.at is slow)
    onehot = np.zeros((flat.size, rows))
    onehot[np.arange(flat.size), flat] = 1.0

    def vjp(g):
        return onehot.T @ g.reshape(-1, cols)

    return _from_op(data, (table,), (vjp,), "gather_rows")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} x {b.shape} not broadcastable") from exc

    k, n = b.shape[-2], b.shape[-1]

    def vjp_a(g):
        if b.ndim == 2:  # single GEMM instead of a broadcast batch product
            return (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        if b.ndim == 2:
            return a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _from_op(data, (a, b), (vjp_a, vjp_b), "matmul")


# ---------------------------------------------------------------------------
# softmax family (fused kernels)
# ---------------------------------------------------------------------------


def softmax_lastdim(x, additive_bias=None):
    """Stable softmax over the last dimension, with an optional additive bias.

    Bias entries may be -inf (masked positions come out exactly 0); a row
    whose entries are all -inf is defined as all-zeros. NaN inputs are
    rejected.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: bad shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_lastdim: NaN in inputs")
    if additive_bias is not None:
        bias = as_tensor(additive_bias)
        if np.isnan(bias.data).any():
            raise NumericError("softmax_lastdim: NaN in bias")
        try:
            z = x.data + bias.data
        except ValueError as exc:
            raise DimensionError(
                f"softmax_lastdim: bias shape {bias.shape} does not broadcast to {x.shape}"
            ) from exc
    else:
        bias = None
        z = x.data

    cols = z.shape[-1]
    w = kernels.softmax_rows(z.reshape(-1, cols)).reshape(z.shape)

    def vjp_x(g):
        dz = kernels.softmax_rows_grad(
            w.reshape(-1, cols), np.ascontiguousarray(g.reshape(-1, cols))
        ).reshape(z.shape)
        return _unbroadcast(dz, x.shape)

    if bias is None:
        return _from_op(w, (x,), (vjp_x,), "softmax")

    def vjp_bias(g):
        dz = kernels.softmax_rows_grad(
            w.reshape(-1, cols), np.ascontiguousarray(g.reshape(-1, cols))
        ).reshape(z.shape)
        return _unbroadcast(dz, bias.shape)

    return _from_op(w, (x, bias), (vjp_x, vjp_bias), "softmax")


def log_softmax_lastdim(x):
    """Log-softmax over the last dimension (finite inputs only)."""
    x = as_tensor(x)
    if np.isnan(x.data).any() or np.isinf(x.data).any():
        raise NumericError("log_softmax_lastdim: inputs must be finite")
    cols = x.shape[-1]
    out = kernels.log_softmax_rows(x.data.reshape(-1, cols)).reshape(x.shape)

    def vjp(g):
        return kernels.log_softmax_rows_grad(
            out.reshape(-1, cols), np.ascontiguousarray(g.reshape(-1, cols))
        ).reshape(x.shape)

    return _from_op(out, (x,), (vjp,), "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Fused layer normalization over the last dimension."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    D = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp_x(g):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True)
        term -= xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        return inv * term

    def vjp_gain(g):
        return (g * xhat).reshape(-1, D).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, D).sum(axis=0)

    return _from_op(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias), "layer_norm")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _check_axis(x: Tensor, axis) -> Optional[int]:
    if axis is None:
        if x.size == 0:
            raise DimensionError("reduce: empty tensor")
        return None
    axis = int(axis)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"reduce: axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"reduce: empty axis {axis} in shape {x.shape}")
    return axis


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _unary(x, data, lambda g: _expand_reduced(g, x.shape, axis, keepdims).copy(), "sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    data = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _unary(
        x, data, lambda g: _expand_reduced(g, x.shape, axis, keepdims) / n, "mean"
    )


def reduce_max(x, axis=None, keepdims=False):
    """Max reduction; the gradient routes to the first maximal element."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    data = np.max(x.data, axis=axis, keepdims=keepdims)

    if axis is None:
        flat_idx = int(np.argmax(x.data))

        def vjp(g):
            gx = np.zeros_like(x.data)
            gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return gx

    else:
        arg = np.argmax(x.data, axis=axis)

        def vjp(g):
            gx = np.zeros_like(x.data)
            garr = np.asarray(g)
            if keepdims:
                garr = np.squeeze(garr, axis=axis)
            np.put_along_axis(
                gx, np.expand_dims(arg, axis), np.expand_dims(garr, axis), axis
            )
            return gx

    return _unary(x, data, vjp, "max")


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class GraphTape:
    """Topologically ordered record of the ops reaching one output tensor.

    ``nodes`` lists every tensor in the output's history such that each
    node appears after all of its inputs; replaying in reverse therefore
    visits each node after all of its consumers.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "GraphTape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every reachable tensor.

    Each backward call contributes exactly once per tensor; repeated calls
    on the same loss add up.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

    tape = GraphTape.from_output(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = local.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None or not parent.requires_grad:
                continue
            contrib = vjp(g)
            acc = local.get(id(parent))
            if acc is None:
                # may alias a vjp output; dict values are never mutated in place
                local[id(parent)] = contrib
            else:
                local[id(parent)] = acc + contrib
    for node in tape.nodes:
        if not node.requires_grad:
            continue
        g = local.get(id(node))
        if g is None:
            continue
        if node._grad is not None:
            node._grad = node._grad + g
        elif node._parents:
            node._grad = np.asarray(g)  # intermediates: hand the pass array over
        else:
            # leaves are mutated in place downstream (clipping, zeroing), so
            # they must own their gradient memory
            node._grad = np.array(g, dtype=np.float64, copy=True)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    den_floor: float = 1e-8,
) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is |analytic - numeric| divided by
    max(den_floor, |analytic| + |numeric|). When ``max_coords`` is given
    and smaller than x.size, a deterministic random subset of coordinates
    is probed; prior parameters and other small tensors should be checked
    exhaustively (the default).

    Central differences carry roundoff noise of about |f| * 1e-16 / eps,
    so coordinates whose true gradient sits near that floor cannot be
    verified in purely relative terms; raise ``den_floor`` to the noise
    allowance when checking full-model losses.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"grad_check: eps must be in (0, 1e-2], got {eps}")

    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ContractError("grad_check: f must produce a scalar")
    backward(y)
    analytic = x.grad.copy().reshape(-1)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        coords = np.sort(
            np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        )
    else:
        coords = np.arange(n)

    max_err = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(den_floor, abs(a) + abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
