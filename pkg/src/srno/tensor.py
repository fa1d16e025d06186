"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the super-resolution model needs are provided. Every op
takes and returns :class:`Tensor`; when a :class:`Tape` is active and any
input requires a gradient, the op appends a node to the tape. Outside a tape
nothing is recorded, which is how inference runs.

Broadcasting is deliberately narrow: a binary op accepts two tensors of the
same shape, or one whose shape is a suffix of the other's (broadcast over
leading batch dimensions only). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tensor:
    """Row-major real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops; use as a context manager.

    ``backward`` walks the nodes in exact reverse execution order. Tapes are
    thread-confined: the active-tape stack is thread local.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, root: Tensor, grad=None):
        if not root.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording inside an active tape (used by finite differences)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        _tape_stack()[:] = self._saved
        return False


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _make(data, inputs: tuple, backward: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    if track:
        tape.record(out, inputs, backward)
    return out


def _suffix_compatible(a_shape, b_shape):
    if a_shape == b_shape:
        return True
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    return long_[len(long_) - len(short):] == short


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return np.asarray(g.sum(axis=tuple(range(lead))))


def _check_binary(name, a, b):
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcastable "
                         "(only leading batch dimensions may differ)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    _check_binary("add", a, b)

    def back(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    _check_binary("sub", a, b)

    def back(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                -_reduce_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    _check_binary("mul", a, b)

    def back(g):
        return (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), back)


def scale(x, c: float) -> Tensor:
    x = _t(x)
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = _t(x)
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    xd = x.data
    th = np.tanh(c * (xd + a * xd * xd * xd))
    half = x.dtype.type(0.5)

    def back(g):
        dinner = c * (1 + 3 * a * xd * xd)
        return (g * (half * (1 + th) + half * xd * (1 - th * th) * dinner),)

    return _make(half * xd * (1 + th), (x,), back)


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at 0."""
    x = _t(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


_POINTWISE = {"relu": relu, "gelu": gelu, "add": add, "mul": mul, "scale": scale,
              "sub": sub, "abs": absolute}


def pointwise(name: str, *args) -> Tensor:
    try:
        fn = _POINTWISE[name]
    except KeyError:
        raise ValueError(f"unknown pointwise op {name!r}; expected one of {sorted(_POINTWISE)}")
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    x = _t(x)
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = _t(x)
    n = x.data.size
    inv = x.dtype.type(1.0 / n)
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g * inv, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _t(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _t(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_t(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[y.shape for y in xs]} disagree off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), back)


def gather_rows(x, index) -> Tensor:
    """Select rows along the second-to-last axis.

    ``x`` is ``(M, C)`` with integer ``index`` of shape ``(n,)``, or
    ``(B, M, C)`` with ``index`` of shape ``(B, n)``. Returns ``(.., n, C)``.
    """
    x = _t(x)
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise TypeError("gather_rows: index must be integer")
    if x.ndim == 2 and index.ndim == 1:
        sel = (index,)
    elif x.ndim == 3 and index.ndim == 2 and index.shape[0] == x.shape[0]:
        sel = (np.arange(x.shape[0])[:, None], index)
    else:
        raise ShapeError(f"gather_rows: index {index.shape} does not match source {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-2]):
        raise IndexError("gather_rows: index out of range")

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, sel, g)
        return (gx,)

    return _make(x.data[sel], (x,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    a = _t(a)
    b = _t(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")

    def back(g):
        ga = g @ _swap(b.data) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(a.data) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """Point-wise affine map ``x @ weight + bias`` over the last axis.

    The weight is stored ``(d_in, d_out)``; this is the 1x1-convolution of the
    model written as a matrix product over flattened sample points.
    """
    x = _t(x)
    weight = _t(weight, x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out, inputs, back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale/shift.

    ``gamma``/``beta`` may carry extra leading axes (e.g. one gain vector per
    attention head) as long as their shape is a suffix of ``x.shape``.
    """
    x = _t(x)
    gamma = _t(gamma, x)
    beta = _t(beta, x)
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.ndim == 0 or not _suffix_compatible(p.shape, x.shape) or p.ndim > x.ndim:
            raise ShapeError(f"layer_norm: {name} {p.shape} incompatible with input {x.shape}")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = rstd * (gxhat - m1 - xhat * m2)
        gg = _reduce_to(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _reduce_to(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    del d
    return _make(out, (x, gamma, beta), back)


def conv2d(x, weight, bias=None, pad: int = 0) -> Tensor:
    """Stride-1 zero-padded cross-correlation (no kernel flip).

    ``x`` is ``(C_in, H, W)`` or batched ``(N, C_in, H, W)``; ``weight`` is
    ``(C_out, C_in, k, k)``.
    """
    x = _t(x)
    weight = _t(weight, x)
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected (N,)C,H,W input and 4-D weight, got {x.shape}, {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight {weight.shape} expects {c_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    k = kh
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel support {k}x{k}")

    # Implicit GEMM on the flattened padded image: with row pitch wp, tap
    # (ky, kx) of output pixel p reads flat index p + ky*wp + kx. Outputs are
    # computed on an (ho, wp) grid and the wp - wo trailing columns dropped.
    hp, wp = h + 2 * pad, w + 2 * pad
    span = ho * wp
    xp = np.zeros((n, c, hp * wp + k - 1), dtype=xd.dtype)
    xp[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, pad:pad + h, pad:pad + w] = xd
    offsets = [ky * wp + kx for ky in range(k) for kx in range(k)]
    w_taps = weight.data.transpose(2, 3, 0, 1).reshape(k * k * c_out, c)
    y = np.matmul(w_taps, xp)
    acc = np.zeros((n, c_out, span), dtype=xd.dtype)
    for j, off in enumerate(offsets):
        acc += y[:, j * c_out:(j + 1) * c_out, off:off + span]
    out = acc.reshape(n, c_out, ho, wp)[:, :, :, :wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out[0] if squeeze else out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gd = g[None] if squeeze else g
        g_ext = np.zeros((n, c_out, ho, wp), dtype=xd.dtype)
        g_ext[:, :, :, :wo] = gd
        g_ext = g_ext.reshape(n, c_out, span)
        gx = None
        if x.requires_grad:
            wt_taps = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, c_out)
            z = np.matmul(wt_taps, g_ext)
            gxp = np.zeros_like(xp)
            for j, off in enumerate(offsets):
                gxp[:, :, off:off + span] += z[:, j * c:(j + 1) * c]
            gx = gxp[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, pad:pad + h, pad:pad + w]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        gw = None
        if weight.requires_grad:
            gw = np.empty((k * k, c_out, c), dtype=xd.dtype)
            for j, off in enumerate(offsets):
                gw[j] = np.matmul(g_ext, xp[:, :, off:off + span].transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gw.reshape(k, k, c_out, c).transpose(2, 3, 0, 1))
        if bias is None:
            return gx, gw
        return gx, gw, (gd.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return _make(out, inputs, back)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class GradCheckResult(float):
    """Max relative error (a float) with bookkeeping attached."""

    checked: int
    skipped: int

    def __new__(cls, value, checked, skipped):
        obj = super().__new__(cls, value)
        obj.checked = checked
        obj.skipped = skipped
        return obj


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               max_elements: int | None = None, rng=None, floor: float = 1e-3,
               kink_tol: float = 1e-6) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` is a zero-argument callable closing over ``inputs``. Inputs should be
    float64. At most ``max_elements`` entries (drawn uniformly over all inputs)
    are perturbed. Per-element error is ``|a - n| / max(|a|, |n|, floor * G)``
    with ``G`` the largest sampled gradient magnitude.

    Elements whose stencil straddles a kink (ReLU, |.|) are detected by
    comparing the step-``h`` and step-``h/2`` estimates, which agree to
    ``O(h^2)`` only where ``f`` is smooth; they are excluded and counted in
    ``result.skipped``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
        if not np.all(np.isfinite(out.data)):
            raise NumericError("grad_check: f returned a non-finite value")
        if out.requires_grad:
            tape.backward(out)
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    analytic = [t.grad for t in inputs]

    sizes = [t.data.size for t in inputs]
    total = sum(sizes)
    if max_elements is None or max_elements >= total:
        picks = np.arange(total)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        picks = np.sort(rng.choice(total, size=max_elements, replace=False))
    offsets = np.cumsum([0] + sizes)

    def evaluate():
        with no_tape():
            v = float(f().data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError("grad_check: non-finite value during finite differences")
        return v

    a_vals, n_vals, smooth = [], [], []
    for p in picks:
        i = int(np.searchsorted(offsets, p, side="right") - 1)
        j = int(p - offsets[i])
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        est = []
        for step in (h, h / 2):
            flat[j] = orig + step
            fp = evaluate()
            flat[j] = orig - step
            fm = evaluate()
            flat[j] = orig
            est.append((fp - fm) / (2 * step))
        a_vals.append(float(analytic[i].reshape(-1)[j]))
        n_vals.append(est[0])
        smooth.append(est)

    a_vals = np.array(a_vals)
    n_vals = np.array(n_vals)
    gscale = max(np.max(np.abs(a_vals), initial=0.0), np.max(np.abs(n_vals), initial=0.0))
    denom_floor = max(floor * gscale, 1e-12)
    keep = np.array([abs(e1 - e2) <= kink_tol * max(gscale, 1e-12) for e1, e2 in smooth], dtype=bool)
    if not keep.any():
        return GradCheckResult(0.0, 0, len(picks))
    err = np.abs(a_vals - n_vals) / np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), denom_floor)
    return GradCheckResult(float(err[keep].max()), int(keep.sum()), int((~keep).sum()))
