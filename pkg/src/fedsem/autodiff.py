"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a ``numpy`` array together with an optional
gradient buffer and a link into the differentiation graph.  The graph is
built eagerly: every operation creates a new node whose id is drawn from
a global monotone counter, so inputs always precede outputs and a
backward sweep in strictly decreasing id order visits consumers before
producers.  Saved activations live in the backward closures.

All data is double precision.  Operations are deterministic: identical
seeds and inputs reproduce bit-identical forward and backward results on
one platform.
"""

import itertools

import numpy as np
from scipy.special import erf

_node_counter = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(data):
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Dense real N-d array participating in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_node_id")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._node_id = next(_node_counter)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn, op):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        return out

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self):
        """Return a graph-free view of the same data."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The receiver must be a scalar (size-1) tensor.  Contributions
        accumulate: callers are responsible for zeroing parameter grads
        between steps.  Detached tensors cut the traversal, so their
        upstream paths contribute zero.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        # Collect the reachable grad-requiring subgraph.
        order = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            order.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        # Consumers were created after their inputs, so decreasing node id
        # is a valid reverse topological order.
        order.sort(key=lambda t: t._node_id, reverse=True)

        flowing = {id(self): np.ones_like(self.data)}
        for t in order:
            g = flowing.pop(id(t), None)
            if g is None:
                continue
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
            if t._backward_fn is not None:
                for parent, contribution in t._backward_fn(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in flowing:
                        flowing[key] = flowing[key] + contribution
                    else:
                        flowing[key] = contribution

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    # -- chainable methods ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_count(self.shape, axis)
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def item(self):
        return float(self.data.reshape(-1)[0])


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward_fn(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return Tensor._from_op(data, (a, b), backward_fn, "add")


def neg(a):
    def backward_fn(g):
        return ((a, -g),)

    return Tensor._from_op(-a.data, (a,), backward_fn, "neg")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward_fn(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return Tensor._from_op(data, (a, b), backward_fn, "mul")


def power(a, exponent):
    exponent = float(exponent)
    data = a.data ** exponent

    def backward_fn(g):
        return ((a, g * exponent * a.data ** (exponent - 1.0)),)

    return Tensor._from_op(data, (a,), backward_fn, "pow")


def exp(a):
    data = np.exp(a.data)

    def backward_fn(g):
        return ((a, g * data),)

    return Tensor._from_op(data, (a,), backward_fn, "exp")


def log(a):
    data = np.log(a.data)

    def backward_fn(g):
        return ((a, g / a.data),)

    return Tensor._from_op(data, (a,), backward_fn, "log")


# -- activations --------------------------------------------------------------

def relu(a):
    data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        return ((a, g * (a.data > 0.0)),)

    return Tensor._from_op(data, (a,), backward_fn, "relu")


def leaky_relu(a, slope=0.01):
    data = np.where(a.data > 0.0, a.data, slope * a.data)

    def backward_fn(g):
        return ((a, g * np.where(a.data > 0.0, 1.0, slope)),)

    return Tensor._from_op(data, (a,), backward_fn, "leaky_relu")


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((a, g * (cdf + x * pdf)),)

    return Tensor._from_op(data, (a,), backward_fn, "gelu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return ((a, g * out * (1.0 - out)),)

    return Tensor._from_op(out, (a,), backward_fn, "sigmoid")


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    original = a.data.shape
    data = a.data.reshape(shape)

    def backward_fn(g):
        return ((a, g.reshape(original)),)

    return Tensor._from_op(data, (a,), backward_fn, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward_fn(g):
        return ((a, g.transpose(inverse)),)

    return Tensor._from_op(data, (a,), backward_fn, "transpose")


def broadcast_to(a, shape):
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def backward_fn(g):
        return ((a, _unbroadcast(g, a.data.shape)),)

    return Tensor._from_op(data, (a,), backward_fn, "broadcast_to")


def getitem(a, key):
    """Basic (non-fancy) indexing; backward scatters into zeros."""
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return ((a, full),)

    return Tensor._from_op(data.copy(), (a,), backward_fn, "getitem")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(index)]))
        return tuple(pieces)

    return Tensor._from_op(data, tuple(tensors), backward_fn, "concat")


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward_fn(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        g_exp = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a2 % a.data.ndim for a2 in axes):
                g_exp = np.expand_dims(g_exp, ax)
        return ((a, np.broadcast_to(g_exp, a.data.shape).copy()),)

    return Tensor._from_op(data, (a,), backward_fn, "sum")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands need ndim >= 2."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.data.shape)),
                (b, _unbroadcast(gb, b.data.shape)))

    return Tensor._from_op(data, (a, b), backward_fn, "matmul")


# -- softmax ------------------------------------------------------------------

def softmax_with_temperature(logits, tau=1.0, mask=None, axis=-1):
    """Softmax of ``logits / tau`` with optional exclusion mask.

    ``tau`` may be a positive float or a positive scalar Tensor (in
    which case gradients flow into it).  ``mask`` is a boolean array
    broadcastable to the logits; True entries are excluded from the
    normalization and their outputs are exactly 0.  A fully-masked slice
    along ``axis`` is rejected.
    """
    logits = _wrap(logits)
    if isinstance(tau, Tensor):
        scaled = mul(logits, power(tau, -1.0))
    else:
        tau = float(tau)
        if tau <= 0.0:
            raise ValueError("temperature must be positive")
        scaled = mul(logits, 1.0 / tau) if tau != 1.0 else logits
    return masked_softmax(scaled, mask=mask, axis=axis)


def masked_softmax(a, mask=None, axis=-1):
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if np.any(np.all(mask, axis=axis)):
            raise ValueError("softmax slice with every position masked")
        x = np.where(mask, -np.inf, x)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)           # exp(-inf) == 0 exactly at masked positions
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - inner)),)

    return Tensor._from_op(out, (a,), backward_fn, "softmax")


def log_softmax(logits, axis=-1):
    """Numerically stable log(softmax(x)) built from primitives."""
    logits = _wrap(logits)
    shifted = add(logits, Tensor(-np.max(logits.data, axis=axis, keepdims=True)))
    lse = log(tsum(exp(shifted), axis=axis, keepdims=True))
    return add(shifted, neg(broadcast_to(lse, logits.data.shape)))


# -- convolution --------------------------------------------------------------

def _conv_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _conv_extent(h, kh, stride, pad)
    wo = _conv_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride))
    return windows.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, out_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = out_shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        buf = buf[:, :, pad:pad + h, pad:pad + w]
    return buf


def conv2d(x, weight, stride=1, padding=0):
    """2-d cross-correlation, NCHW input, OIHW weight."""
    x, weight = _wrap(x), _wrap(weight)
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def backward_fn(g):
        gmat = g.reshape(n, o, ho * wo)
        grad_w = np.einsum("nol,nkl->ok", gmat, cols).reshape(weight.data.shape)
        grad_cols = np.matmul(wmat.T, gmat)
        grad_x = _col2im(grad_cols, x.data.shape, kh, kw, stride, padding, ho, wo)
        return ((x, grad_x), (weight, grad_w))

    return Tensor._from_op(out, (x, weight), backward_fn, "conv2d")


def conv_transpose2d(x, weight, stride=1, padding=0):
    """Adjoint of conv2d (scatter-add); weight layout (C_in, C_out, KH, KW)."""
    x, weight = _wrap(x), _wrap(weight)
    n, a, hi, wi = x.data.shape
    aw, b, kh, kw = weight.data.shape
    if aw != a:
        raise ValueError(f"conv_transpose2d channel mismatch: input {a}, weight {aw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (hi - 1) * stride - 2 * padding + kh
    wo = (wi - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("transpose convolution output collapsed to nothing")

    xmat = x.data.reshape(n, a, hi * wi)
    wmat = weight.data.reshape(a, b * kh * kw)
    cols = np.matmul(wmat.T, xmat)
    out = _col2im(cols, (n, b, ho, wo), kh, kw, stride, padding, hi, wi)

    def backward_fn(g):
        gcols, gho, gwo = _im2col(g, kh, kw, stride, padding)
        grad_x = np.matmul(wmat, gcols).reshape(x.data.shape)
        grad_w = np.einsum("nal,nkl->ak", xmat, gcols).reshape(weight.data.shape)
        return ((x, grad_x), (weight, grad_w))

    return Tensor._from_op(out, (x, weight), backward_fn, "conv_transpose2d")


# -- pixel shuffle ------------------------------------------------------------

def pixel_shuffle(x, r):
    """Channel-to-space rearrangement: (N, C r^2, H, W) -> (N, C, H r, W r)."""
    x = _wrap(x)
    n, c, h, w = x.data.shape
    if c % (r * r) != 0:
        raise ValueError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    t = reshape(x, (n, co, r, r, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (n, co, h * r, w * r))


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    x = _wrap(x)
    n, c, h, w = x.data.shape
    if h % r != 0 or w % r != 0:
        raise ValueError(f"spatial extents ({h}, {w}) not divisible by r = {r}")
    t = reshape(x, (n, c, h // r, r, w // r, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (n, c * r * r, h // r, w // r))
