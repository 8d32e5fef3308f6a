"""Dense tensors with a reverse-mode differentiation tape.

Every op is a plain function that computes its forward value with numpy and
records a closure mapping the output gradient to input gradients. Calling
``Tensor.backward`` on a scalar replays the tape in reverse topological order.

Leaves created with ``requires_grad=True`` start with an all-zero ``grad``;
gradients accumulate into it until ``zero_grad`` is called. A leaf the
backward pass never reaches keeps its zero gradient.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- operators -------------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- reverse pass ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precision in one graph: {a.dtype} vs {b.dtype}")
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), backward, "mul")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, xd * slope)
    dslope = np.where(pos, xd.dtype.type(1), xd.dtype.type(slope))
    return make_op(out, (x,), lambda g: (g * dslope,), "leaky_relu")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return make_op(out, (x,), lambda g: (unbroadcast(g, src),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics for 1-D and 2-D ``b`` (``a`` may be batched)."""
    a, b = _pair(a, b)
    if b.ndim not in (1, 2) or a.ndim < 1:
        raise ShapeError(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return make_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [..., in] and ``weight`` [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    if x.dtype != weight.dtype:
        raise TypeError(f"mixed precision in one graph: {x.dtype} vs {weight.dtype}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    out = (xd.reshape(-1, xd.shape[-1]) @ wd.T).reshape(*lead, wd.shape[0])
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(*lead, wd.shape[1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "linear")


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel: int = 1,
                  dilation: int = 1) -> Tensor:
    """Valid 1-D dilated convolution over the time axis.

    ``x`` is [batch, T, C_in]; ``weight`` is [C_out, kernel * C_in] with the tap
    index varying slowest, so ``kernel=1`` uses the same layout as ``linear``.
    Output is [batch, T - dilation*(kernel-1), C_out].
    """
    if x.ndim != 3:
        raise ShapeError(f"temporal_conv: expected [batch, T, C], got {x.shape}")
    b, t, c = x.shape
    span = dilation * (kernel - 1)
    if t < span + 1:
        raise ShapeError(f"temporal_conv: need at least {span + 1} frames for kernel={kernel}, "
                         f"dilation={dilation}; got {t}")
    if weight.shape[1] != kernel * c:
        raise ShapeError(f"temporal_conv: weight {weight.shape} does not match kernel {kernel} "
                         f"x channels {c}")
    t_out = t - span
    xd, wd = x.data, weight.data
    if kernel == 1:
        cols = xd
    else:
        cols = np.concatenate([xd[:, i * dilation:i * dilation + t_out] for i in range(kernel)], axis=2)
    cols2 = cols.reshape(-1, cols.shape[-1])
    out = (cols2 @ wd.T).reshape(b, t_out, wd.shape[0])
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ cols2
        gcols = (g2 @ wd).reshape(b, t_out, wd.shape[1])
        if kernel == 1:
            gx = gcols
        else:
            gx = np.zeros_like(xd)
            for i in range(kernel):
                gx[:, i * dilation:i * dilation + t_out] += gcols[:, :, i * c:(i + 1) * c]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "temporal_conv")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.dtype for t in tensors}) > 1:
        raise TypeError("mixed precision in one graph")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(out, tensors, backward, "concat")


def take(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Select an index set along ``axis`` (indices must be distinct)."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis {ax} of size {n}")
    if np.unique(idx).size != idx.size:
        raise ShapeError("take: indices must be distinct")
    out = np.take(x.data, idx, axis=ax)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.moveaxis(full, ax, 0)[idx] = np.moveaxis(g, ax, 0)
        return (full,)

    return make_op(out, (x,), backward, "take")


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    shape = x.shape
    basic = _is_basic(key)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward, "getitem")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return make_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return make_op(out, (x,), lambda g: (np.array(_expand(g, shape, axis, keepdims)),), "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)
    return make_op(out, (x,),
                   lambda g: (np.array(_expand(g, shape, axis, keepdims)) / count,), "mean")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over every axis but the last.

    In training mode the batch statistics normalize ``x`` and the running
    statistics are updated in place (running variance uses the unbiased
    estimate). In inference mode the running statistics are used and the op
    is affine in ``x``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    n = xd.size // c
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma.data * inv
        xhat = (xd - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def backward(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_op(out, (x, gamma, beta), backward, "batch_norm_eval")

    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 samples per channel")
    mean = xd.mean(axis=axes)
    centered = xd - mean
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / (n - 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn(point)`` must return a scalar Tensor. ``point`` is perturbed in place
    (and restored), so ``fn`` may close over it instead of using its argument.
    Per coordinate the error is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if not point.requires_grad:
        point.requires_grad = True
    point.zero_grad()
    out = fn(point)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: fn must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = point.grad.copy()

    flat = point.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(point).data)
        flat[i] = orig - step
        fm = float(fn(point).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"finite_diff_check: non-finite value at coordinate "
                                     f"{tuple(int(k) for k in np.unravel_index(i, point.shape))}")
        numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(1e-12, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.grad)) for t in tensors if t.grad is not None)
