"""Dense float64 tensors with reverse-mode automatic differentiation.

Every backward rule is expressed through the same primitive operations
that build forward passes, so gradients are themselves differentiable
graphs.  Passing ``create_graph=True`` to :func:`backward` or
:func:`grad` therefore yields second-order gradients, which the
training losses need for R1 and path-length penalties.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_scalar",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "sigmoid",
    "softplus",
    "leaky_relu",
    "sum_",
    "mean_",
    "expand",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "matmul",
    "linear",
    "GatherPlan",
    "index_select_last",
    "embed_last",
    "conv3d_core",
    "conv3d_wgrad",
    "swapflip",
    "conv3d",
    "modulated_conv3d",
    "upsample3d_nearest",
    "downsample3d_sum",
    "avg_pool3d",
    "upsample3d_linear",
    "downsample3d_linear_adjoint",
    "add_noise",
    "pixelwise_normalize",
    "backward",
    "grad",
]

_grad_enabled = True


class _GradMode:
    def __init__(self, enabled):
        self._enabled = enabled
        self._prev = None

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = self._enabled
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def no_grad():
    """Context manager that disables graph recording."""
    return _GradMode(False)


def enable_grad():
    """Context manager that re-enables graph recording."""
    return _GradMode(True)


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse mode.

    ``_parents`` and ``_backward`` are set only on tensors produced by a
    recorded operation; leaves keep both empty.  ``_backward`` maps the
    upstream gradient to a tuple of parent gradients and is built from
    primitives, so it can be recorded again for double backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise DimensionError(
                f"item() needs a single-element tensor, got shape {self.data.shape}"
            )
        return float(self.data.reshape(()))

    def detach(self):
        """A new leaf sharing this tensor's values, cut from the graph."""
        return Tensor(self.data)

    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars become constant tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter:
    """A trainable tensor with an equalized-learning-rate multiplier."""

    def __init__(self, data, name="", lr_multiplier=1.0):
        if lr_multiplier <= 0:
            raise UsageError(f"lr_multiplier must be positive, got {lr_multiplier}")
        self.tensor = Tensor(data, requires_grad=True)
        self.lr_multiplier = float(lr_multiplier)
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)

    return _record(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _record(a.data / b.data, (a, b), None)

    def bwd(g):
        ga = _reduce_to(div(g, b), a.shape)
        gb = _reduce_to(neg(mul(g, div(out, b))), b.shape)
        return ga, gb

    out._backward = bwd
    return out


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (neg(g),))


def pow_scalar(a, p):
    a = as_tensor(a)
    p = float(p)

    def bwd(g):
        return (mul(g, mul(pow_scalar(a, p - 1.0), p)),)

    return _record(a.data ** p, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = _record(np.exp(a.data), (a,), None)
    out._backward = lambda g: (mul(g, out),)
    return out


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = as_tensor(a)
    out = _record(np.sqrt(a.data), (a,), None)
    out._backward = lambda g: (div(mul(g, 0.5), out),)
    return out


def absolute(a):
    """|a|; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _record(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def sigmoid(a):
    a = as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    data[~pos] = ez / (1.0 + ez)
    out = _record(data, (a,), None)
    out._backward = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a):
    """log(1 + e^x), computed as x + log(1 + e^-x) for large x."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _record(data, (a,), lambda g: (mul(g, sigmoid(a)),))


def leaky_relu(a, slope=0.2):
    """max(x, slope*x); the active-side mask is treated as a constant."""
    a = as_tensor(a)
    mask = Tensor(np.where(a.data >= 0, 1.0, slope))
    return _record(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# reductions and shape primitives


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bwd(g):
        gk = g if keepdims else reshape(g, kept)
        return (expand(gk, a.shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = 1
        for ax in axis:
            count *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def expand(a, shape):
    """Broadcast ``a`` to ``shape``; the adjoint sums back."""
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _record(np.ascontiguousarray(data), (a,), lambda g: (_reduce_to(g, a.shape),))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    return _record(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _record(data, (a,), lambda g: (transpose(g, inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(narrow(g, axis, start, n))
            start += n
        return tuple(grads)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a, axis, start, length):
    """Slice ``length`` elements from ``start`` along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if start < 0 or start + length > n:
        raise DimensionError(
            f"narrow out of range on axis {axis}: [{start}, {start + length}) vs size {n}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim)
    )

    def bwd(g):
        parts = []
        if start > 0:
            before = list(a.shape)
            before[axis] = start
            parts.append(Tensor(np.zeros(before)))
        parts.append(g)
        if start + length < n:
            after = list(a.shape)
            after[axis] = n - start - length
            parts.append(Tensor(np.zeros(after)))
        return (concat(parts, axis=axis) if len(parts) > 1 else g,)

    return _record(np.ascontiguousarray(a.data[index]), (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axes differ: a axis 1 is {a.shape[1]}, b axis 0 is {b.shape[0]}"
        )

    def bwd(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record(a.data @ b.data, (a, b), bwd)


def linear(x, weight, bias=None):
    """x @ weight.T + bias for 2-D x (rows are samples)."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# gather/scatter on the last axis


class GatherPlan:
    """Precomputed bookkeeping for a fixed last-axis gather.

    The scatter adjoint groups duplicate targets with a stable sort once,
    so repeated backward passes cost one ``add.reduceat`` instead of a
    per-element scatter.
    """

    def __init__(self, indices, size):
        idx = np.asarray(indices, dtype=np.int64).ravel()
        size = int(size)
        if idx.size == 0:
            raise UsageError("GatherPlan needs at least one index")
        if idx.min() < 0 or idx.max() >= size:
            raise DimensionError(
                f"gather indices out of range [0, {size}): min {idx.min()}, max {idx.max()}"
            )
        self.indices = idx
        self.size = size
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        self.unique, self.starts = np.unique(sorted_idx, return_index=True)


def index_select_last(a, plan):
    """Gather plan.indices along the last axis."""
    a = as_tensor(a)
    if a.shape[-1] != plan.size:
        raise DimensionError(
            f"gather source last axis is {a.shape[-1]}, plan expects {plan.size}"
        )
    return _record(a.data[..., plan.indices], (a,), lambda g: (embed_last(g, plan),))


def embed_last(a, plan):
    """Scatter-add into a zero tensor of last-axis size plan.size."""
    a = as_tensor(a)
    if a.shape[-1] != plan.indices.size:
        raise DimensionError(
            f"scatter source last axis is {a.shape[-1]}, plan has {plan.indices.size} indices"
        )
    out = np.zeros(a.shape[:-1] + (plan.size,))
    seg = np.add.reduceat(a.data[..., plan.order], plan.starts, axis=-1)
    out[..., plan.unique] = seg
    return _record(out, (a,), lambda g: (index_select_last(g, plan),))


# ---------------------------------------------------------------------------
# 3-D convolution family

# conv3d_core and conv3d_wgrad form a closed pair: each one's backward is
# written with the other (plus swapflip), so arbitrarily deep double
# backward stays inside the primitive set.


def _conv3d_raw(x, w):
    n, c, d, h, wd = x.shape
    o = w.shape[0]
    k = w.shape[2]
    pad = k // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x
    acc = np.zeros((o, n, d, h, wd))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                view = xp[:, :, dz : dz + d, dy : dy + h, dx : dx + wd]
                acc += np.tensordot(w[:, :, dz, dy, dx], view, axes=(1, 1))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def _conv3d_wgrad_raw(x, g, k):
    n, c, d, h, wd = x.shape
    o = g.shape[1]
    pad = k // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x
    gw = np.empty((o, c, k, k, k))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                view = xp[:, :, dz : dz + d, dy : dy + h, dx : dx + wd]
                gw[:, :, dz, dy, dx] = np.tensordot(
                    g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
    return gw


def _check_conv_shapes(x, w, op):
    if x.ndim != 5:
        raise DimensionError(f"{op}: input must be 5-D (N,C,D,H,W), got {x.ndim}-D")
    if w.ndim != 5:
        raise DimensionError(f"{op}: weight must be 5-D (O,C,k,k,k), got {w.ndim}-D")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"{op}: input channel axis 1 is {x.shape[1]}, weight channel axis 1 is {w.shape[1]}"
        )
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"{op}: kernel must be cubic with odd size, got {w.shape[2:]}")


def conv3d_core(x, w):
    """Cross-correlation with stride 1 and same-size zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_shapes(x, w, "conv3d_core")
    k = w.shape[2]

    def bwd(g):
        return conv3d_core(g, swapflip(w)), conv3d_wgrad(x, g, k)

    return _record(_conv3d_raw(x.data, w.data), (x, w), bwd)


def conv3d_wgrad(x, g, k):
    """Weight gradient of conv3d_core: correlate input with output grad."""
    x, g = as_tensor(x), as_tensor(g)
    if x.ndim != 5 or g.ndim != 5:
        raise DimensionError("conv3d_wgrad expects 5-D input and output-grad tensors")
    if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise DimensionError(
            f"conv3d_wgrad batch/spatial mismatch: {x.shape} vs {g.shape}"
        )

    def bwd(gw):
        return conv3d_core(g, swapflip(gw)), conv3d_core(x, gw)

    return _record(_conv3d_wgrad_raw(x.data, g.data, k), (x, g), bwd)


def swapflip(w):
    """Swap the two channel axes and flip all spatial axes.

    conv3d_core(g, swapflip(w)) is the input-gradient (transposed) form
    of conv3d_core(x, w); swapflip is its own inverse.
    """
    w = as_tensor(w)
    if w.ndim != 5:
        raise DimensionError(f"swapflip expects a 5-D weight, got {w.ndim}-D")
    data = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return _record(data, (w,), lambda g: (swapflip(g),))


def conv3d(x, weight, bias=None):
    """Standard 3-D convolution block primitive (stride 1, same padding)."""
    out = conv3d_core(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise DimensionError(
                f"conv3d bias has shape {bias.shape}, expected ({weight.shape[0]},)"
            )
        out = add(out, reshape(bias, (1, -1, 1, 1, 1)))
    return out


def modulated_conv3d(x, weight, style, demodulate=True, eps=1e-8):
    """Per-sample style modulation with optional weight demodulation.

    Scaling input channels by the style and convolving equals convolving
    with a per-channel-scaled kernel, so modulation is applied to the
    activations and demodulation to the outputs; both routes carry
    gradients.  ``style`` is one vector or one per batch row.
    """
    x, weight, style = as_tensor(x), as_tensor(weight), as_tensor(style)
    _check_conv_shapes(x, weight, "modulated_conv3d")
    if not np.isfinite(style.data).all():
        from .errors import NumericError

        raise NumericError("modulated_conv3d: style contains non-finite values")
    if style.ndim == 1:
        style = reshape(style, (1, -1))
    if style.shape[1] != x.shape[1]:
        raise DimensionError(
            f"style length {style.shape[1]} does not match input channels {x.shape[1]}"
        )
    s = reshape(style, style.shape + (1, 1, 1))
    out = conv3d_core(mul(x, s), weight)
    if demodulate:
        wsq = sum_(mul(weight, weight), axis=(2, 3, 4))  # (O, C)
        ssq = mul(style, style)  # (N, C)
        norm2 = add(matmul(ssq, transpose(wsq)), eps)  # (N, O)
        inv = pow_scalar(norm2, -0.5)
        out = mul(out, reshape(inv, inv.shape + (1, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# resampling primitives


def upsample3d_nearest(x):
    """Nearest-neighbour x2 on the three trailing spatial axes."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"upsample3d_nearest expects 5-D input, got {x.ndim}-D")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    return _record(data, (x,), lambda g: (downsample3d_sum(g),))


def downsample3d_sum(x):
    """Sum over non-overlapping 2x2x2 blocks; adjoint of nearest upsample."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"downsample3d_sum expects 5-D input, got {x.ndim}-D")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise DimensionError(f"downsample3d_sum needs even spatial extents, got {(d, h, w)}")
    data = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))
    return _record(data, (x,), lambda g: (upsample3d_nearest(g),))


def avg_pool3d(x):
    return mul(downsample3d_sum(x), 0.125)


def _up_linear_axis(a, axis):
    lo = np.concatenate([a.take([0], axis=axis), a], axis=axis)
    lo = np.delete(lo, a.shape[axis], axis=axis)  # x[max(i-1, 0)]
    hi = np.concatenate([a, a.take([-1], axis=axis)], axis=axis)
    hi = np.delete(hi, 0, axis=axis)  # x[min(i+1, n-1)]
    even = 0.75 * a + 0.25 * lo
    odd = 0.75 * a + 0.25 * hi
    stacked = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return stacked.reshape(shape)


def _down_linear_adjoint_axis(g, axis):
    sl_even = tuple(
        slice(0, None, 2) if i == axis else slice(None) for i in range(g.ndim)
    )
    sl_odd = tuple(
        slice(1, None, 2) if i == axis else slice(None) for i in range(g.ndim)
    )
    ge = g[sl_even]
    go = g[sl_odd]
    r = 0.75 * (ge + go)

    def tail(arr, lo, hi):
        return tuple(
            slice(lo, hi) if i == axis else slice(None) for i in range(arr.ndim)
        )

    r[tail(r, 1, None)] += 0.25 * go[tail(go, 0, -1)]
    r[tail(r, 0, -1)] += 0.25 * ge[tail(ge, 1, None)]
    r[tail(r, 0, 1)] += 0.25 * ge[tail(ge, 0, 1)]
    r[tail(r, -1, None)] += 0.25 * go[tail(go, -1, None)]
    return r


def upsample3d_linear(x):
    """Trilinear x2 upsampling over the three trailing axes.

    Each axis doubles with the half-cell-centre stencil (0.75, 0.25),
    clamped at the ends.  The adjoint is downsample3d_linear_adjoint,
    a closed linear pair for double backward.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"upsample3d_linear expects 5-D input, got {x.ndim}-D")
    data = x.data
    for axis in (2, 3, 4):
        data = _up_linear_axis(data, axis)
    return _record(data, (x,), lambda g: (downsample3d_linear_adjoint(g),))


def downsample3d_linear_adjoint(x):
    """Exact adjoint of upsample3d_linear (not an interpolating filter)."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(
            f"downsample3d_linear_adjoint expects 5-D input, got {x.ndim}-D"
        )
    data = x.data
    for axis in (4, 3, 2):
        data = _down_linear_adjoint_axis(data, axis)
    return _record(data, (x,), lambda g: (upsample3d_linear(g),))


# ---------------------------------------------------------------------------
# small composites used by the networks


def add_noise(x, noise_map, scale):
    """x + scale * noise, broadcasting a single-channel map over channels."""
    x, noise_map, scale = as_tensor(x), as_tensor(noise_map), as_tensor(scale)
    if noise_map.ndim != x.ndim:
        raise DimensionError(
            f"noise map rank {noise_map.ndim} does not match input rank {x.ndim}"
        )
    return add(x, mul(noise_map, scale))


def pixelwise_normalize(x, eps=1e-8):
    """Scale rows of a 2-D tensor to unit RMS across the feature axis."""
    x = as_tensor(x)
    ms = mean_(mul(x, x), axis=-1, keepdims=True)
    return mul(x, pow_scalar(add(ms, eps), -0.5))


# ---------------------------------------------------------------------------
# reverse-mode driver


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root, create_graph):
    if not isinstance(root, Tensor):
        raise UsageError("backward target must be a Tensor")
    if root.data.size != 1:
        raise UsageError(f"backward target must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward target is detached from any differentiable input")
    order = _toposort(root)
    grads = {id(root): (root, Tensor(np.ones(root.shape)))}
    mode = enable_grad() if create_graph else no_grad()
    with mode:
        for node in reversed(order):
            entry = grads.get(id(node))
            if entry is None or node._backward is None:
                continue
            parent_grads = node._backward(entry[1])
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = (parent, pg if prev is None else add(prev[1], pg))
    return grads


def backward(loss, create_graph=False):
    """Accumulate gradients of a scalar into every reachable leaf's .grad.

    Returns a map from leaf tensor to gradient for convenience.
    """
    grads = _backprop(loss, create_graph)
    result = {}
    for tensor, g in grads.values():
        if tensor._backward is None and tensor.requires_grad:
            if tensor.grad is None:
                tensor.grad = g
            else:
                tensor.grad = Tensor(tensor.grad.data + g.data)
            result[tensor] = g
    return result


def grad(output, inputs, create_graph=False):
    """Functional gradients of a scalar output w.r.t. explicit inputs.

    Does not touch .grad.  With ``create_graph=True`` the returned
    tensors stay on the graph, so penalties built from them can be
    differentiated again.
    """
    single = isinstance(inputs, Tensor)
    targets = [inputs] if single else list(inputs)
    grads = _backprop(output, create_graph)
    out = []
    for t in targets:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise UsageError("grad target is detached from the graph")
        entry = grads.get(id(t))
        out.append(entry[1] if entry is not None else Tensor(np.zeros(t.shape)))
    return out[0] if single else out
