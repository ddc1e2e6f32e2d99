"""Dense float64 tensors with reverse-mode automatic differentiation.

A thread-local gradient tape records every differentiable operation in
forward order.  ``backward(loss)`` replays the tape in reverse, visiting
each recorded op exactly once and accumulating gradients into every
tensor that requires them.  All math is float64 and every op output is
checked for NaN/Inf, so numerical failures surface at the op that
produced them instead of propagating.

Broadcasting is deliberately restricted: two operands must have equal
shapes, or one must be a scalar, or the smaller shape must be a suffix
of the larger (leading-batch broadcast, e.g. ``[T, d] + [d]``).
Anything else requires an explicit reshape.  This keeps every backward
rule auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward called on a detached/non-scalar loss or a consumed tape."""


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable ops for one forward pass.

    Entries are appended in execution order, so the list is already a
    topological order of the graph: an op's inputs were recorded (or are
    leaves) before the op itself.
    """

    def __init__(self) -> None:
        self.entries: list[_TapeEntry] = []
        self.consumed = False

    def record(self, output: "Tensor", inputs: Sequence["Tensor"],
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self.entries.append(_TapeEntry(output, tuple(inputs), backward_fn))


_state = threading.local()


def _active_tape() -> GradTape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = GradTape()
        _state.tape = tape
    return tape


def reset_graph() -> GradTape:
    """Discard the current thread's tape and start a fresh one."""
    tape = GradTape()
    _state.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "no_grad_depth", 0) == 0


class no_grad:
    """Context manager suppressing tape recording (for eval/decoding loops)."""

    def __enter__(self):
        _state.no_grad_depth = getattr(_state, "no_grad_depth", 0) + 1
        return self

    def __exit__(self, *exc):
        _state.no_grad_depth -= 1
        return False


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64, order="C")
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in output of {op_name}")


class Tensor:
    """Dense row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __truediv__(self, other): return div(self, _wrap(other))
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(output: Tensor, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Attach one op to the active tape if gradients are being tracked.

    ``backward_fn`` maps the output gradient to one gradient (or None)
    per input, in order.  Exposed so other modules can define fused ops
    (e.g. rotary embedding) with hand-written backward rules.
    """
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _active_tape().record(output, inputs, backward_fn)
    return output


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from loss.

    The loss must be a scalar produced on the current tape.  A second
    backward without ``reset_graph()`` raises, because gradients would
    silently double-accumulate.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _active_tape()
    if tape.consumed:
        raise GraphError("backward already ran on this tape; call reset_graph() first")
    produced = {id(e.output) for e in tape.entries}
    if id(loss) not in produced:
        raise GraphError("loss is not connected to the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        out_grad = grads.pop(id(entry.output), None)
        if out_grad is None:
            continue
        if entry.output.requires_grad:
            _accumulate_grad(entry.output, out_grad)
        input_grads = entry.backward_fn(out_grad)
        for tensor, g in zip(entry.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            if id(tensor) in produced:
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                _accumulate_grad(tensor, g)
    tape.consumed = True


def _accumulate_grad(tensor: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = g.copy()
    else:
        tensor.grad = tensor.grad + g


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- broadcasting helpers --------------------------------------------------

def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> None:
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast "
                         "(only suffix/leading-batch broadcasting is supported)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# -- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                             _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                             _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")
    return record_op(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                             _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = a.data / b.data
    _check_finite(raw, "div")
    out = Tensor(raw)
    return record_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = a.data ** exponent
    _check_finite(raw, "power")
    out = Tensor(raw)
    return record_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the gate activation used in expert FFNs."""
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)
    _check_finite(out.data, "silu")

    def bwd(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return record_op(out, (a,), bwd)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """2-D matrix product.

    With ``row_stable=True`` the forward product is computed by a
    fixed-order reduction so that each output row is bitwise independent
    of how many other rows are in the batch.  BLAS (the default) picks
    kernels based on matrix size, which perturbs low bits when the same
    row is evaluated inside batches of different heights — unacceptable
    where batch composition varies per token (expert dispatch) but a
    causality guarantee is still expected.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if row_stable:
        raw = np.einsum("ij,jk->ik", a.data, b.data)
    else:
        raw = a.data @ b.data
    out = Tensor(raw)
    _check_finite(out.data, "matmul")
    return record_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = Tensor(np.dot(a.data, b.data))
    _check_finite(out.data, "dot")
    return record_op(out, (a, b), lambda g: (g * b.data, g * a.data))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())
    return record_op(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(out, tuple(tensors), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return record_op(out, (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by integer index (embedding lookup); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(out, (a,), bwd)


def scatter_rows(rows: Tensor, indices, n_rows: int) -> Tensor:
    """Place ``rows[i]`` at position ``indices[i]`` of an n_rows output.

    Duplicate indices accumulate.  Backward is a plain row gather.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if rows.data.ndim != 2 or idx.shape != (rows.shape[0],):
        raise ShapeError("scatter_rows expects 2-D rows and one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_rows index out of range for {n_rows} rows")
    buf = np.zeros((n_rows, rows.shape[1]))
    np.add.at(buf, idx, rows.data)
    out = Tensor(buf)
    return record_op(out, (rows,), lambda g: (g[idx],))


def take_per_row(a: Tensor, indices) -> Tensor:
    """``out[t, j] = a[t, indices[t, j]]`` (per-token top-k probability gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_per_row: incompatible shapes {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = Tensor(a.data[rows, idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return record_op(out, (a,), bwd)


def take_pairs(a: Tensor, row_idx, col_idx) -> Tensor:
    """Gather arbitrary (row, col) entries of a 2-D tensor into a vector."""
    ri = np.asarray(row_idx, dtype=np.intp)
    ci = np.asarray(col_idx, dtype=np.intp)
    if a.data.ndim != 2 or ri.shape != ci.shape or ri.ndim != 1:
        raise ShapeError("take_pairs expects a 2-D tensor and flat index pairs")
    out = Tensor(a.data[ri, ci])

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (ri, ci), g)
        return (full,)

    return record_op(out, (a,), bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by scalar s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {s.shape}")
    out = Tensor(x.data * s.data[:, None])
    _check_finite(out.data, "scale_rows")
    return record_op(out, (x, s), lambda g: (g * s.data[:, None],
                                             (g * x.data).sum(axis=1)))


# -- reductions ------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    _check_finite(out.data, "sum")

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record_op(out, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    out = Tensor(a.data.mean(axis=axis))
    _check_finite(out.data, "mean")

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return record_op(out, (a,), bwd)


# -- fused neural-net ops --------------------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    """Shift-stable softmax along ``axis``; outputs sum to 1 per slice."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    _check_finite(out.data, "softmax")

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return record_op(out, (x,), bwd)


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Shift-stable log(sum(exp(x))) along ``axis``; gradient is softmax(x)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"logsumexp axis {axis} invalid for shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(m + np.log(s), axis=axis))
    _check_finite(out.data, "logsumexp")

    def bwd(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return record_op(out, (x,), bwd)


def rms_norm(x: Tensor, weight: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Divide each last-axis slice by its root-mean-square, then scale.

    y_i = w_i * x_i / r with r = sqrt(mean(x^2) + eps).  The backward
    rule follows from d r / d x_j = x_j / (d * r):

        dL/dx_j = (g_j w_j - x_j/(d r^2) * sum_i g_i w_i x_i) / r
        dL/dw_i = g_i x_i / r
    """
    d = x.shape[-1]
    if weight.data.ndim != 1 or weight.shape[0] != d:
        raise ShapeError(f"rms_norm: weight length {weight.shape} does not match "
                         f"last dimension of {x.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        ms = np.mean(x.data ** 2, axis=-1, keepdims=True)
        r = np.sqrt(ms + eps)
        normed = x.data / r
        out = Tensor(normed * weight.data)
    _check_finite(out.data, "rms_norm")

    def bwd(g):
        with np.errstate(over="ignore", invalid="ignore"):
            gw = g * weight.data
            inner = (gw * x.data).sum(axis=-1, keepdims=True)
            gx = (gw - x.data * inner / (d * r * r)) / r
            grad_w = (g * normed).reshape(-1, d).sum(axis=0)
        return (gx, grad_w)

    return record_op(out, (x, weight), bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int],
                  ignore_index: int = -100) -> Tensor:
    """Mean negative log-probability over positions not equal to ignore_index."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {logits.shape[0]} logit rows "
                         f"but {tgt.shape} targets")
    valid = tgt != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy: every position is ignored, mean undefined")
    vocab = logits.shape[1]
    checked = tgt[valid]
    if checked.min() < 0 or checked.max() >= vocab:
        raise ShapeError(f"cross_entropy: target outside [0, {vocab})")

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    log_probs = (logits.data - m) - np.log(s)
    rows = np.nonzero(valid)[0]
    out = Tensor(-log_probs[rows, tgt[rows]].sum() / n_valid)
    _check_finite(out.data, "cross_entropy")

    def bwd(g):
        probs = e / s
        grad = np.zeros_like(logits.data)
        grad[rows] = probs[rows]
        grad[rows, tgt[rows]] -= 1.0
        return (grad * (g / n_valid),)

    return record_op(out, (logits,), bwd)
