"""Minimal reverse-mode automatic differentiation over dense matrices.

Every value is a 2-d float64 matrix wrapped in a :class:`Tensor`.  While a
:class:`Tape` is active (``with Tape() as tape:``) each primitive records
the saved values its backward rule needs; ``tape.backward(loss)`` then
replays the record once in reverse and accumulates gradients per input
tensor.  Saved values are copied, never aliased, so in-place parameter
updates between passes cannot corrupt a tape.

Only first-order gradients are supported; the Hamiltonian field elsewhere
in the package is written in closed form out of these same primitives
precisely so that nothing ever needs gradients of gradients.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

from .graph import SparseGraph


class TapeError(RuntimeError):
    """Tape misuse: nesting, reuse after backward, or cross-tape tensors."""


class NumericalError(ArithmeticError):
    """A primitive produced a non-finite result; the message names it."""


_active_tape = None


@contextlib.contextmanager
def paused():
    """Temporarily stop recording on the active tape (if any)."""
    global _active_tape
    saved = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = saved


class Tensor:
    """Dense (rows, cols) float64 matrix, optionally recorded on a tape.

    ``requires_grad`` marks a leaf whose gradient may be queried after a
    backward pass.  Tensors produced by primitives under an active tape
    carry a reference to that tape; feeding them into a different tape is
    an error.
    """

    __slots__ = ("value", "requires_grad", "tape")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor construction: non-finite values")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.tape is not None

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


class GradientMap:
    """Gradients keyed by tensor identity; absent tensors read as zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def of(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(tensor)
        if g is None:
            return np.zeros(tensor.shape)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor in self._grads

    def __len__(self) -> int:
        return len(self._grads)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Single-context op record; backward visits each op exactly once."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("another tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, out: Tensor, inputs: tuple, vjp) -> None:
        out.tape = self
        self._records.append(_Record(out, inputs, vjp))

    def backward(self, output: Tensor, seed: float = 1.0) -> GradientMap:
        """Accumulate d(output)/d(leaf) for every touched grad leaf.

        ``output`` must be a (1, 1) scalar recorded on this tape.  Fan-out
        accumulates additively; leaves not reachable from the output simply
        stay absent from the map and read as zero.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if output.shape != (1, 1):
            raise TapeError(f"backward needs a (1, 1) scalar output, got {output.shape}")
        if output.tape is not self:
            raise TapeError("output tensor was not recorded on this tape")
        self._consumed = True

        grads: dict[Tensor, np.ndarray] = {output: np.full((1, 1), float(seed))}
        for rec in reversed(self._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for tensor, piece in zip(rec.inputs, rec.vjp(g)):
                if piece is None:
                    continue
                held = grads.get(tensor)
                grads[tensor] = piece if held is None else held + piece
        return GradientMap(grads)


def _recording_tape(*tensors) -> Tape | None:
    if _active_tape is None:
        return None
    tracked = False
    for t in tensors:
        if t.tape is not None and t.tape is not _active_tape:
            raise TapeError("input tensor belongs to a different tape")
        tracked = tracked or t.tracked
    return _active_tape if tracked else None


def _finish(name: str, value: np.ndarray) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{name}: non-finite result")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.tape = None
    return out


def _shape_error(name: str, *shapes) -> ValueError:
    return ValueError(f"{name}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# Primitives.  Each computes its forward value, validates finiteness, and,
# when recording applies, captures copies of exactly the values its vjp
# needs for the inputs that can carry gradient.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    av = a.value.T if transpose_a else a.value
    bv = b.value.T if transpose_b else b.value
    if av.shape[1] != bv.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = _finish("matmul", av @ bv)
    tape = _recording_tape(a, b)
    if tape is not None:
        need_a, need_b = a.tracked, b.tracked
        b_saved = b.value.copy() if need_a else None
        a_saved = a.value.copy() if need_b else None

        def vjp(g):
            da = db = None
            if need_a:
                bs = b_saved.T if transpose_b else b_saved
                da = g @ bs.T
                if transpose_a:
                    da = da.T
            if need_b:
                as_ = a_saved.T if transpose_a else a_saved
                db = as_.T @ g
                if transpose_b:
                    db = db.T
            return da, db

        tape._append(out, (a, b), vjp)
    return out


def spmm(graph: SparseGraph, x: Tensor) -> Tensor:
    """Graph propagation norm_adjacency @ x as a taped primitive.

    The propagation matrix is symmetric, so the backward pass reuses it
    directly as its own transpose.
    """
    if x.shape[0] != graph.num_nodes:
        raise _shape_error("spmm", (graph.num_nodes, graph.num_nodes), x.shape)
    out = _finish("spmm", graph.norm_adjacency @ x.value)
    tape = _recording_tape(x)
    if tape is not None:
        mat = graph.norm_adjacency

        def vjp(g):
            return (mat @ g,)

        tape._append(out, (x,), vjp)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a (1, d) row broadcast over a's rows."""
    broadcast = b.shape != a.shape
    if broadcast and b.shape != (1, a.shape[1]):
        raise _shape_error("add", a.shape, b.shape)
    out = _finish("add", a.value + b.value)
    tape = _recording_tape(a, b)
    if tape is not None:
        need_a, need_b = a.tracked, b.tracked

        def vjp(g):
            da = g if need_a else None
            db = None
            if need_b:
                db = g.sum(axis=0, keepdims=True) if broadcast else g
            return da, db

        tape._append(out, (a, b), vjp)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    with np.errstate(over="ignore"):
        out = _finish("scale", x.value * c)
    tape = _recording_tape(x)
    if tape is not None:

        def vjp(g):
            return (g * c,)

        tape._append(out, (x,), vjp)
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("elementwise_mul", a.shape, b.shape)
    out = _finish("elementwise_mul", a.value * b.value)
    tape = _recording_tape(a, b)
    if tape is not None:
        need_a, need_b = a.tracked, b.tracked
        b_saved = b.value.copy() if need_a else None
        a_saved = a.value.copy() if need_b else None

        def vjp(g):
            da = g * b_saved if need_a else None
            db = g * a_saved if need_b else None
            return da, db

        tape._append(out, (a, b), vjp)
    return out


def tanh(x: Tensor) -> Tensor:
    out = _finish("tanh", np.tanh(x.value))
    tape = _recording_tape(x)
    if tape is not None:
        y_saved = out.value.copy()

        def vjp(g):
            return (g * (1.0 - y_saved * y_saved),)

        tape._append(out, (x,), vjp)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise _shape_error("concat_cols", a.shape, b.shape)
    out = _finish("concat_cols", np.concatenate([a.value, b.value], axis=1))
    tape = _recording_tape(a, b)
    if tape is not None:
        ca = a.shape[1]
        need_a, need_b = a.tracked, b.tracked

        def vjp(g):
            da = g[:, :ca].copy() if need_a else None
            db = g[:, ca:].copy() if need_b else None
            return da, db

        tape._append(out, (a, b), vjp)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    rows, cols = x.shape
    if not 0 <= start <= stop <= cols:
        raise ValueError(f"slice_cols: [{start}, {stop}) out of range for {cols} columns")
    out = _finish("slice_cols", x.value[:, start:stop].copy())
    tape = _recording_tape(x)
    if tape is not None:
        shape = x.shape

        def vjp(g):
            dx = np.zeros(shape)
            dx[:, start:stop] = g
            return (dx,)

        tape._append(out, (x,), vjp)
    return out


def split_cols(x: Tensor, cols: int) -> tuple[Tensor, Tensor]:
    """Split into the left ``cols`` columns and the remainder."""
    return slice_cols(x, 0, cols), slice_cols(x, cols, x.shape[1])


def frobenius_smooth(x: Tensor, eps: float = 1e-12) -> Tensor:
    """sqrt(sum(x^2) + eps) as a (1, 1) scalar.

    ``eps`` keeps the norm differentiable at x = 0; zero is allowed when
    the caller can rule that point out.
    """
    if eps < 0:
        raise ValueError(f"frobenius_smooth: eps must be non-negative, got {eps}")
    val = float(np.sqrt(np.sum(x.value * x.value) + eps))
    out = _finish("frobenius_smooth", np.array([[val]]))
    tape = _recording_tape(x)
    if tape is not None:
        x_saved = x.value.copy()

        def vjp(g):
            return (float(g[0, 0]) / val * x_saved,)

        tape._append(out, (x,), vjp)
    return out


def div_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Divide every entry of x by the (1, 1) scalar tensor s."""
    if s.shape != (1, 1):
        raise _shape_error("div_scalar", x.shape, s.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _finish("div_scalar", x.value / s.value[0, 0])
    tape = _recording_tape(x, s)
    if tape is not None:
        need_x, need_s = x.tracked, s.tracked
        s_saved = float(s.value[0, 0])
        x_saved = x.value.copy() if need_s else None

        def vjp(g):
            dx = g / s_saved if need_x else None
            ds = None
            if need_s:
                ds = np.array([[-np.sum(g * x_saved) / (s_saved * s_saved)]])
            return dx, ds

        tape._append(out, (x, s), vjp)
    return out


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows; duplicate indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError(f"take_rows: index out of range for {x.shape[0]} rows")
    out = _finish("take_rows", x.value[idx].copy())
    tape = _recording_tape(x)
    if tape is not None:
        shape = x.shape
        idx_saved = idx.copy()

        def vjp(g):
            dx = np.zeros(shape)
            np.add.at(dx, idx_saved, g)
            return (dx,)

        tape._append(out, (x,), vjp)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _finish("softmax_rows", p)
    tape = _recording_tape(x)
    if tape is not None:
        p_saved = p.copy()

        def vjp(g):
            inner = (g * p_saved).sum(axis=1, keepdims=True)
            return (p_saved * (g - inner),)

        tape._append(out, (x,), vjp)
    return out


def masked_nll(probs: Tensor, labels, mask) -> Tensor:
    """Mean negative log probability of the true class over masked rows."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("masked_nll: empty mask")
    if labels.size != probs.shape[0]:
        raise _shape_error("masked_nll", probs.shape, (labels.size,))
    picked = probs.value[mask, labels[mask]]
    with np.errstate(divide="ignore"):
        val = float(-np.mean(np.log(picked)))
    out = _finish("masked_nll", np.array([[val]]))
    tape = _recording_tape(probs)
    if tape is not None:
        shape = probs.shape
        rows = mask.copy()
        cols = labels[mask].copy()
        picked_saved = picked.copy()

        def vjp(g):
            dp = np.zeros(shape)
            np.add.at(dp, (rows, cols), -float(g[0, 0]) / (rows.size * picked_saved))
            return (dp,)

        tape._append(out, (probs,), vjp)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Evaluated in the standard overflow-free form so saturated logits stay
    finite in both passes.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise _shape_error("bce_with_logits", logits.shape, t.shape)
    z = logits.value
    val = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    out = _finish("bce_with_logits", np.array([[val]]))
    tape = _recording_tape(logits)
    if tape is not None:
        resid = (expit(z) - t) / z.size

        def vjp(g):
            return (float(g[0, 0]) * resid,)

        tape._append(out, (logits,), vjp)
    return out


def sum_squares(x: Tensor) -> Tensor:
    out = _finish("sum_squares", np.array([[float(np.sum(x.value * x.value))]]))
    tape = _recording_tape(x)
    if tape is not None:
        x_saved = x.value.copy()

        def vjp(g):
            return (2.0 * float(g[0, 0]) * x_saved,)

        tape._append(out, (x,), vjp)
    return out
