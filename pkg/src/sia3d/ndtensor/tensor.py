"""Dense n-d tensors with reverse-mode automatic differentiation.

The graph is implicit: every op returns a Tensor holding references to its
parents and a closure that pushes the incoming gradient to them.  backward()
topologically sorts that structure and visits each node exactly once, so leaf
gradients are the exact vector-Jacobian products of the recorded ops.

The op set is fixed and enumerated in this file.  Broadcasting is restricted
to numpy's leading-batch style (trailing axes must agree or be size 1); the
backward of every broadcasting op sums the gradient back to the parent shape.

Precision: tensors carry their dtype.  Oracle tests run float64, training
runs float32; mixing the two in one graph is not supported and ops keep the
dtype of their inputs.
"""

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "tensor", "zeros", "ones", "backward",
    "add", "sub", "mul", "div", "matmul", "transpose", "reshape", "concat",
    "slice_", "gather", "embedding_lookup", "softmax", "log_softmax",
    "layer_norm", "relu", "gelu", "softplus", "pow_", "sum_", "mean_over_set",
    "max_over_set", "l1_norm", "l2_normalize", "cross_entropy_with_logits",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes or axes do not conform."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autograd plumbing -------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            # always copy: g may alias a child's buffer or a broadcast view
            self.grad = np.array(np.broadcast_to(g, self.data.shape),
                                 dtype=self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=np.float64):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into .grad of every reachable requires_grad tensor
    and keep accumulating over repeated calls until zero_grad.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # iterative topo sort; graphs can be thousands of nodes deep
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not supported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), bw)


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    data = np.transpose(x.data, axes)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return _node(data, (x,), bw)


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), bw)


def concat(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    axis = _check_axis(axis, xs[0].ndim)
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
    data = np.concatenate([x.data for x in xs], axis=axis)
    offsets = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                x._accumulate(g[tuple(sl)])

    return _node(data, tuple(xs), bw)


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis), type(None))) for k in parts)


def slice_(x, key):
    x = _as_tensor(x)
    data = x.data[key]
    basic = _is_basic_key(key)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if basic:
                gx[key] += g   # basic slices never repeat an element
            else:
                np.add.at(gx, key, g)
            x._accumulate(gx)

    return _node(data, (x,), bw)


def _scatter_rows(nrows, idx_flat, g2d):
    """Fast axis-0 scatter-add for 2-d data via a single bincount."""
    ncols = g2d.shape[1]
    flat = idx_flat[:, None] * ncols + np.arange(ncols)
    out = np.bincount(flat.ravel(), weights=g2d.ravel(), minlength=nrows * ncols)
    return out.reshape(nrows, ncols)


def gather(x, idx, axis=0):
    """Select along one axis with an integer index array of any shape."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} with extent {x.shape[axis]}")
    data = np.take(x.data, idx, axis=axis)

    def bw(g):
        if not x.requires_grad:
            return
        if axis == 0 and x.ndim == 2:
            gx = _scatter_rows(x.shape[0], idx.ravel(), g.reshape(-1, x.shape[1]))
            x._accumulate(gx.astype(x.dtype, copy=False))
        else:
            gx = np.zeros_like(x.data)
            key = (slice(None),) * axis + (idx,)
            np.add.at(gx, key, g)
            x._accumulate(gx)

    return _node(data, (x,), bw)


def embedding_lookup(table, ids):
    """Row lookup into a (vocab, dim) table; ids is any integer array."""
    return gather(table, np.asarray(ids, dtype=np.int64), axis=0)


# -- nonlinearities ----------------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _node(data, (x,), bw)


def gelu(x):
    x = _as_tensor(x)
    e = erf(x.data * _INV_SQRT2)
    data = 0.5 * x.data * (1.0 + e)

    def bw(g):
        if x.requires_grad:
            d = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accumulate(g * d)

    return _node(data, (x,), bw)


def softplus(x):
    x = _as_tensor(x)
    data = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)

    def bw(g):
        if x.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x.data))
            x._accumulate(g * sig)

    return _node(data, (x,), bw)


def pow_(x, p):
    """x ** p for positive x; p may be a python float or a scalar Tensor."""
    x = _as_tensor(x)
    if isinstance(p, Tensor):
        if p.data.size != 1:
            raise ShapeError(f"pow: exponent must be scalar, got shape {p.shape}")
        data = np.power(x.data, p.data)

        def bw(g):
            if x.requires_grad:
                x._accumulate(g * p.data * np.power(x.data, p.data - 1.0))
            if p.requires_grad:
                p._accumulate(np.sum(g * data * np.log(x.data)).reshape(p.shape))

        return _node(data, (x, p), bw)

    pf = float(p)
    data = np.power(x.data, pf)

    def bwf(g):
        if x.requires_grad:
            x._accumulate(g * pf * np.power(x.data, pf - 1.0))

    return _node(data, (x,), bwf)


# -- reductions and normalizations -------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).copy())

    return _node(data, (x,), bw)


def mean_over_set(x, axis):
    """Mean over one set axis."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    data = x.data.mean(axis=axis)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy())

    return _node(data, (x,), bw)


def max_over_set(x, axis):
    """Max over one set axis; gradient routes to the first argmax (ties)."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    data = x.data.max(axis=axis)
    arg = x.data.argmax(axis=axis)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
            x._accumulate(gx)

    return _node(data, (x,), bw)


def l1_norm(x, axis=None, keepdims=False):
    """Sum of absolute values (subgradient 0 at exactly 0)."""
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    data = np.abs(x.data).sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        s = np.sign(x.data)
        if axis is None:
            x._accumulate(s * g)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(s * ge)

    return _node(data, (x,), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / ||x||2 along axis; inputs with norm < eps map to the zero vector."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = norm >= eps
    denom = np.where(safe, norm, 1.0)
    data = np.where(safe, x.data / denom, 0.0)

    def bw(g):
        if x.requires_grad:
            y = data
            dot = np.sum(g * y, axis=axis, keepdims=True)
            gx = np.where(safe, (g - y * dot) / denom, 0.0)
            x._accumulate(gx)

    return _node(data, (x,), bw)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    data = z

    def bw(g):
        if x.requires_grad:
            y = data
            gy = g * y
            gy -= y * np.sum(gy, axis=axis, keepdims=True)
            x._accumulate(gy)

    return _node(data, (x,), bw)


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bw(g):
        if x.requires_grad:
            sm = np.exp(data)
            x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _node(data, (x,), bw)


def layer_norm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalize over one axis, then scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} must be ({n},)")
    moved = axis != x.ndim - 1
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    yd = gamma.data * xhat + beta.data
    data = np.moveaxis(yd, -1, axis) if moved else yd

    def bw(g):
        gm = np.moveaxis(g, axis, -1) if moved else g
        if gamma.requires_grad:
            gamma._accumulate((gm * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(gm.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = gm * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(np.moveaxis(gx, -1, axis) if moved else gx)

    return _node(data, (x, gamma, beta), bw)


def cross_entropy_with_logits(logits, targets):
    """Per-row negative log likelihood; targets holds integer class ids.

    logits has shape (..., C), targets shape (...); returns shape (...).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    ncls = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= ncls):
        raise ShapeError(f"cross_entropy: target id out of range for {ncls} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    data = -picked

    def bw(g):
        if logits.requires_grad:
            sm = np.exp(logp)
            onehot = np.zeros_like(sm)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            logits._accumulate((sm - onehot) * g[..., None])

    return _node(data, (logits,), bw)
