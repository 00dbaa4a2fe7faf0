"""Minimal dense tensor library with reverse-mode automatic differentiation.

All arrays are contiguous row-major float64. Gradients are recorded on an
explicit tape (``with Tape() as tape: ...``); operations executed outside an
active tape run forward-only, which is how frozen/momentum parameters and
inference are evaluated without paying for graph construction.

Broadcasting is deliberately restricted: elementwise binary ops accept either
two operands of identical shape, or one tensor and one scalar (python float
or size-1 tensor). Anything fancier raises ShapeError.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation (e.g. log of <= 0)."""


class DegenerateInputError(ValueError):
    """Input is degenerate for the operation (e.g. normalizing a zero vector)."""


class GradCheckError(RuntimeError):
    """Gradient check could not be completed (non-finite evaluation)."""


_ACTIVE_TAPE = None


class Tensor:
    """Dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def constant(data):
    """Non-trainable tensor (wraps without gradient tracking)."""
    if isinstance(data, Tensor):
        return Tensor(data.data, requires_grad=False)
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of primitive operations for one forward pass.

    backward() replays the recorded closures in exact reverse order of
    recording. Tapes do not nest.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and propagate to all recorded leaves."""
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_out(data, *inputs):
    """Create the op output; register gradients only under an active tape."""
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(x.requires_grad for x in inputs)
    if needs:
        out.requires_grad = True
    return out, (tape if needs else None)


def _as_operand(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(float(x))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def _binary_mode(a, b, opname):
    """Return 'same', 'a_scalar' or 'b_scalar' per the documented broadcast rule."""
    if a.data.shape == b.data.shape:
        return "same"
    if a.data.size == 1:
        return "a_scalar"
    if b.data.size == 1:
        return "b_scalar"
    raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} "
                     "are neither equal nor scalar-broadcastable")


def _binary(a, b, opname, fwd, da, db):
    """Shared plumbing for elementwise binary ops with scalar broadcast."""
    a = _as_operand(a)
    b = _as_operand(b)
    mode = _binary_mode(a, b, opname)
    out, tape = _make_out(fwd(a.data, b.data), a, b)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                ga = da(g, a.data, b.data)
                _accum(a, ga.sum().reshape(a.data.shape) if mode == "a_scalar" else ga)
            if b.requires_grad:
                gb = db(g, a.data, b.data)
                _accum(b, gb.sum().reshape(b.data.shape) if mode == "b_scalar" else gb)
        tape.record(bwd)
    return out


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c):
    """Multiply by a python float constant."""
    c = float(c)
    out, tape = _make_out(a.data * c, a)
    if tape is not None:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, out.grad * c)
        tape.record(bwd)
    return out


def _unary(a, opname, fwd, deriv):
    out, tape = _make_out(fwd(a.data), a)
    if tape is not None:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, out.grad * deriv(a.data, out.data))
        tape.record(bwd)
    return out


def tanh(a):
    return _unary(a, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a):
    return _unary(a, "sigmoid", lambda x: 1.0 / (1.0 + np.exp(-x)),
                  lambda x, y: y * (1.0 - y))


def exp(a):
    return _unary(a, "exp", np.exp, lambda x, y: y)


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    return _unary(a, "log", np.log, lambda x, y: 1.0 / x)


def matmul(a, b):
    """Matrix product (m x k) @ (k x n); gradients g @ b.T and a.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out, tape = _make_out(a.data @ b.data, a, b)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        tape.record(bwd)
    return out


def matvec(a, x):
    """Matrix-vector product (m x k) @ (k,) -> (m,)."""
    if a.data.ndim != 2 or x.data.ndim != 1 or a.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {a.data.shape} and {x.data.shape}")
    out, tape = _make_out(a.data @ x.data, a, x)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, np.outer(g, x.data))
            if x.requires_grad:
                _accum(x, a.data.T @ g)
        tape.record(bwd)
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.data.shape}")
    out, tape = _make_out(a.data.T, a)
    if tape is not None:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, out.grad.T)
        tape.record(bwd)
    return out


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    out, tape = _make_out(a.data.reshape(shape), a)
    if tape is not None:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, out.grad.reshape(a.data.shape))
        tape.record(bwd)
    return out


def concat(parts):
    """Concatenate 1-D tensors."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of empty list")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat expects 1-D parts, got shape {p.data.shape}")
    out, tape = _make_out(np.concatenate([p.data for p in parts]), *parts)
    if tape is not None:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
        def bwd():
            g = out.grad
            if g is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[lo:hi])
        tape.record(bwd)
    return out


def stack_rows(rows):
    """Stack 1-D tensors of equal length into a 2-D tensor."""
    rows = list(rows)
    if not rows:
        raise ShapeError("stack_rows of empty list")
    n = rows[0].data.shape[0]
    for r in rows:
        if r.data.ndim != 1 or r.data.shape[0] != n:
            raise ShapeError("stack_rows expects equal-length 1-D rows")
    out, tape = _make_out(np.stack([r.data for r in rows]), *rows)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            for i, r in enumerate(rows):
                if r.requires_grad:
                    _accum(r, g[i])
        tape.record(bwd)
    return out


def sum_all(a):
    """Sum of all entries -> 0-d tensor."""
    out, tape = _make_out(np.asarray(a.data.sum()), a)
    if tape is not None:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, np.full_like(a.data, float(np.asarray(out.grad).reshape(()))))
        tape.record(bwd)
    return out


def sum_axis(a, axis):
    """Sum of a 2-D tensor along one axis -> 1-D tensor."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum_axis: expected 2-D tensor and axis 0/1, got {a.data.shape}")
    out, tape = _make_out(a.data.sum(axis=axis), a)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            gcol = g[None, :] if axis == 0 else g[:, None]
            _accum(a, np.broadcast_to(gcol, a.data.shape).copy())
        tape.record(bwd)
    return out


def l2_normalize(x):
    """Normalize a 1-D vector to unit L2 norm; zero vectors are an error."""
    if x.data.ndim != 1:
        raise ShapeError(f"l2_normalize expects 1-D, got shape {x.data.shape}")
    n = float(np.linalg.norm(x.data))
    if n == 0.0:
        raise DegenerateInputError("l2_normalize of zero vector")
    u = x.data / n
    out, tape = _make_out(u, x)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            _accum(x, (g - u * np.dot(u, g)) / n)
        tape.record(bwd)
    return out


def max_pool_over_time(x):
    """Column-wise max of an (L x d) tensor -> (d,); ties go to the first row."""
    if x.data.ndim != 2:
        raise ShapeError(f"max_pool_over_time expects 2-D, got shape {x.data.shape}")
    if x.data.shape[0] == 0:
        raise ShapeError("max_pool_over_time over empty sequence")
    arg = np.argmax(x.data, axis=0)  # first occurrence on ties
    out, tape = _make_out(x.data[arg, np.arange(x.data.shape[1])], x)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            gx = np.zeros_like(x.data)
            gx[arg, np.arange(x.data.shape[1])] = g
            _accum(x, gx)
        tape.record(bwd)
    return out


def softplus(a):
    """log(1 + e^a), built from primitives so gradients come off the tape."""
    return log(add(exp(a), 1.0))


def dot(a, b):
    """Inner product of two 1-D tensors -> 0-d tensor."""
    return sum_all(mul(a, b))


class GradCheckReport:
    """Outcome of comparing analytic gradients to central finite differences."""

    def __init__(self, max_rel_err, tol, n_checked, worst):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.n_checked = n_checked
        self.worst = worst  # (param index, flat coordinate)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.0e}, "
                f"n_checked={self.n_checked}, passed={self.passed})")


def grad_check(f, params, step=1e-5, tol=1e-4, max_coords_per_param=None, rng=None):
    """Compare analytic gradients of the scalar f() against central differences.

    f must be a zero-argument callable closing over params and returning a
    scalar Tensor. When max_coords_per_param is given, only that many
    (seeded-random) coordinates per parameter are finite-differenced; the
    analytic pass always covers everything.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError("grad_check needs a scalar function")
        if not np.isfinite(out.data).all():
            raise GradCheckError("non-finite forward evaluation at base point")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    worst = None
    n_checked = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        size = flat.shape[0]
        if max_coords_per_param is not None and size > max_coords_per_param:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        else:
            coords = range(size)
        aflat = analytic[pi].reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + step
            fp = f().data
            flat[ci] = orig - step
            fm = f().data
            flat[ci] = orig
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise GradCheckError(
                    f"non-finite evaluation while perturbing param {pi} coord {ci}")
            numeric = float((fp - fm).reshape(()) / (2.0 * step))
            a = float(aflat[ci])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (pi, int(ci))
    return GradCheckReport(max_rel, tol, n_checked, worst)
