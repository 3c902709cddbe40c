"""Dense float64 tensors with reverse-mode automatic differentiation.

The scope is deliberately small: exactly the primitives the encoder heads,
sparse convolutions and losses need, recorded on an explicit tape and
differentiated by a reverse walk. Ops record onto the innermost active
``Tape`` whenever an input requires gradients; without an active tape the
same functions run as plain numpy (inference mode).

Conventions fixed here so tests are deterministic:
  * ReLU gradient at exactly 0 is 0.
  * reduce_max breaks ties by lowest index (numpy argmax order).
  * backward() overwrites .grad on every reachable requires_grad tensor and
    leaves unreachable tensors untouched.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

# Finite-ness checks on every primitive output; enabled by the test suite,
# off by default to keep training loops lean.
_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; execution order is topological."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate .grad with d(loss)/d(tensor) for every reachable tensor."""
        if loss.values.size != 1:
            raise NotScalar(f"loss has {loss.values.size} elements")
        if not self.entries:
            raise ValueError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            g_out = grads.get(id(entry.output))
            if g_out is None:
                continue
            for inp, g_in in zip(entry.inputs, entry.grad_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    holders[key] = inp
        for key, tensor in holders.items():
            if tensor.requires_grad:
                tensor.grad = np.asarray(grads[key], dtype=np.float64).reshape(tensor.shape)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_values: np.ndarray, inputs: Sequence[Tensor],
            grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_values)):
        raise NonFinite("primitive produced NaN/Inf")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        tape.entries.append(_Entry(tuple(inputs), out, grad_fn))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# --- elementwise arithmetic ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _finish(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _finish(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _finish(av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a: Tensor) -> Tensor:
    return _finish(-a.values, (a,), lambda g: (-g,))


def smul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish(a.values * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _finish(a.values + float(s), (a,), lambda g: (g,))


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant (non-differentiated) array."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.shape:
        raise ShapeMismatch(f"cmul: {a.shape} vs {const.shape}")
    return _finish(a.values * const, (a,), lambda g: (g * const,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.values)
    return _finish(np.abs(a.values), (a,), lambda g: (g * sign,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for a fixed float exponent."""
    e = float(exponent)
    av = a.values
    return _finish(av ** e, (a,), lambda g: (g * e * av ** (e - 1.0),))


def power_t(a: Tensor, p: Tensor) -> Tensor:
    """Elementwise a**p with a learnable scalar exponent.

    Gradient w.r.t. p uses a^p * ln(a); entries with a <= 0 contribute 0,
    which is the correct limit for clamped non-negative inputs.
    """
    if p.values.size != 1:
        raise ShapeMismatch("power_t exponent must be scalar")
    av = a.values
    pv = float(p.values.reshape(()))
    out = av ** pv

    def grad_fn(g):
        ga = g * pv * av ** (pv - 1.0)
        safe = av > 0.0
        logs = np.where(safe, np.log(np.where(safe, av, 1.0)), 0.0)
        gp = np.sum(g * out * logs)
        return ga, np.full(p.shape, gp)

    return _finish(out, (a, p), grad_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is 0 in the clamped region."""
    floor = float(floor)
    mask = a.values > floor
    return _finish(np.maximum(a.values, floor), (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0
    return _finish(a.values * mask, (a,), lambda g: (g * mask,))


# --- linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _finish(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _finish(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def add_rowvec(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-d row vector to every row of an (n, d) matrix."""
    if a.values.ndim != 2 or row.values.ndim != 1 or a.shape[1] != row.shape[0]:
        raise ShapeMismatch(f"add_rowvec: {a.shape} + {row.shape}")
    return _finish(a.values + row.values[None, :], (a, row),
                   lambda g: (g, g.sum(axis=0)))


def scale_rows(a: Tensor, col: np.ndarray) -> Tensor:
    """Scale row i of an (n, d) matrix by constant col[i]."""
    col = np.asarray(col, dtype=np.float64)
    if a.values.ndim != 2 or col.shape != (a.shape[0],):
        raise ShapeMismatch(f"scale_rows: {a.shape} by {col.shape}")
    return _finish(a.values * col[:, None], (a,), lambda g: (g * col[:, None],))


# --- reductions ---

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish(a.values.sum(axis=axis), (a,), grad_fn)


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    shape = a.shape
    return _finish(np.asarray(a.values.mean()), (a,),
                   lambda g: (np.full(shape, g / n),))


def reduce_max(a: Tensor, axis: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max reduction; also returns argmax indices (ties -> lowest index)."""
    av = a.values
    if axis is None:
        arg = int(np.argmax(av))
        shape = a.shape

        def grad_fn(g):
            buf = np.zeros(av.size)
            buf[arg] = np.asarray(g).reshape(())
            return (buf.reshape(shape),)

        out = _finish(np.asarray(av.max()), (a,), grad_fn)
        return out, np.asarray(arg)

    arg = np.argmax(av, axis=axis)

    def grad_fn_ax(g):
        buf = np.zeros_like(av)
        np.put_along_axis(buf, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (buf,)

    out = _finish(av.max(axis=axis), (a,), grad_fn_ax)
    return out, arg


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all elements; subgradient 0 at the origin."""
    n = float(np.sqrt(np.sum(a.values ** 2)))
    av = a.values
    denom = n if n > 0.0 else 1.0
    return _finish(np.asarray(n), (a,), lambda g: (g * av / denom,))


def rownorm(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of an (n, d) matrix -> (n,) vector."""
    if a.values.ndim != 2:
        raise ShapeMismatch("rownorm expects a 2-D tensor")
    av = a.values
    norms = np.sqrt((av ** 2).sum(axis=1))
    denom = np.where(norms > 0.0, norms, 1.0)
    return _finish(norms, (a,), lambda g: (g[:, None] * av / denom[:, None],))


# --- indexed row movement (shared by convolutions and losses) ---

def _scatter_add_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Rows of g accumulated into an (n, d) buffer at idx (repeats summed)."""
    d = g.shape[1] if g.ndim == 2 else 1
    if g.size > 4096:
        # bincount is much faster than ufunc.at for large gathers
        flat = (idx[:, None] * d + np.arange(d)).ravel()
        return np.bincount(flat, weights=g.ravel(), minlength=n * d).reshape(n, d)
    buf = np.zeros((n, d))
    np.add.at(buf, idx, g)
    return buf


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of an (n, d) matrix; scatter-add gradient handles repeats."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    return _finish(a.values[idx], (a,),
                   lambda g: (_scatter_add_rows(g, idx, n),))


def pad_zero_row(a: Tensor) -> Tensor:
    """Append one all-zero row to an (n, d) matrix; gradient drops it."""
    out = np.vstack([a.values, np.zeros((1, a.shape[1]))])
    return _finish(out, (a,), lambda g: (g[:-1],))


def scatter_rows(a: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Accumulate rows of a (k, d) matrix into a (num_rows, d) matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((num_rows, a.shape[1]))
    np.add.at(out, idx, a.values)
    return _finish(out, (a,), lambda g: (g[idx],))


def segment_max(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment column-wise max of an (n, d) matrix.

    segment_ids must be sorted ascending and cover 0..num_segments-1 with at
    least one row each. Gradient flows to the first (lowest-index) maximal
    row per segment and column.
    """
    seg = np.asarray(segment_ids, dtype=np.intp)
    av = a.values
    starts = np.searchsorted(seg, np.arange(num_segments))
    out = np.maximum.reduceat(av, starts, axis=0)

    def grad_fn(g):
        eq = av == out[seg]
        rows = np.where(eq, np.arange(av.shape[0])[:, None], av.shape[0])
        winner = np.minimum.reduceat(rows, starts, axis=0)
        buf = np.zeros_like(av)
        cols = np.broadcast_to(np.arange(av.shape[1]), winner.shape)
        np.add.at(buf, (winner.ravel(), cols.ravel()), g.ravel())
        return (buf,)

    return _finish(out, (a,), grad_fn)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment column-wise sum; same segment layout as segment_max."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    starts = np.searchsorted(seg, np.arange(num_segments))
    out = np.add.reduceat(a.values, starts, axis=0)
    return _finish(out, (a,), lambda g: (g[seg],))


# --- gradient oracle ---

def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                   step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued f against central
    finite differences.

    Returns max over elements of |analytic - fd| / max(1, |fd|).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    probe = Tensor(x.values.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.values.size != 1:
            raise NotScalar("check_gradient needs a scalar-valued function")
        tape.backward(out)
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(probe.values)

    flat = x.values.reshape(-1).copy()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(flat.reshape(x.shape))).values.reshape(())
        flat[i] = orig - step
        lo = f(Tensor(flat.reshape(x.shape))).values.reshape(())
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFinite(f"function not finite near element {i}")
        fd[i] = (hi - lo) / (2.0 * step)

    ana = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(ana - fd) / denom)) if flat.size else 0.0
