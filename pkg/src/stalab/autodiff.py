"""Minimal tape-based reverse-mode automatic differentiation on float64 arrays.

Operations executed while a :class:`Tape` is active are recorded when at least
one input is tracked (a ``requires_grad`` leaf or the output of a recorded
operation).  Without an active tape every op is a plain forward evaluation,
which is what the tracker uses.

Example::

    x = Tensor([2.0], requires_grad=True)
    y = Tensor([3.0])
    with Tape() as tape:
        loss = (x * y).sum()
    grads = backward(loss)   # grads[x] == [3.0]
"""

import threading

import numpy as np

from stalab import kernels

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Value-semantic float64 array with an optional handle into a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return elementwise("add", self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, _as_tensor(other, self))

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return elementwise("scalar-mul", self, float(other))
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise("scalar-mul", self, -1.0)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key):
        return index(self, key)


def _raise_nonscalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(like.shape, float(x)))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, out, parents, vjp, name):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of operations; supports a single backward pass.

    Use as a context manager.  Tapes are thread-local: a record built on one
    thread is invisible to ops running on another.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self.consumed = False

    def _tracked(self, t):
        if not isinstance(t, Tensor):
            return False
        if t.node is not None:
            return t.tape is self
        return t.requires_grad

    def record(self, out, parents, vjp, name):
        out.tape = self
        out.node = len(self.nodes)
        self.nodes.append(_Node(out, parents, vjp, name))

    def backward(self, loss):
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already differentiated; call reset() and re-record")
        self.consumed = True
        grads = {loss.node: np.ones(loss.shape)}
        leaf_grads = {}
        leaves = []
        for i in range(loss.node, -1, -1):
            node = self.nodes[i]
            g = grads.pop(i, None)
            if g is None:
                continue
            pgrads = node.vjp(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not self._tracked(parent):
                    continue
                if parent.node is not None:
                    if parent.node in grads:
                        grads[parent.node] = grads[parent.node] + pg
                    else:
                        grads[parent.node] = pg
                else:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                        leaves.append(parent)
        out = {}
        for leaf in leaves:
            g = leaf_grads[id(leaf)]
            leaf.grad = g
            out[leaf] = g
        return out


def backward(loss):
    """Differentiate a scalar ``loss``; returns ``{leaf_tensor: gradient}``.

    Leaves also get their ``.grad`` attribute set.  Each tape supports one
    backward pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape (no tracked inputs?)")
    return loss.tape.backward(loss)


def _make(arr, parents, vjp, name):
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(tape._tracked(p) for p in parents):
        tape.record(out, parents, vjp, name)
    return out


# ---------------------------------------------------------------- elementwise

ELEMENTWISE_KINDS = ("add", "sub", "mul", "scalar-mul", "relu", "square")


def elementwise(kind, a, b=None):
    """Apply one of ``ELEMENTWISE_KINDS``.

    Binary kinds need equal shapes; ``scalar-mul`` takes a float as ``b``.
    """
    if kind in ("add", "sub", "mul"):
        if not isinstance(b, Tensor):
            b = Tensor._wrap(np.asarray(b, dtype=np.float64))
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {kind}: {a.shape} vs {b.shape}")
    if kind == "add":
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if kind == "sub":
        return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    if kind == "mul":
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if kind == "scalar-mul":
        k = float(b)
        return _make(a.data * k, (a,), lambda g: (g * k,), "scalar-mul")
    if kind == "relu":
        mask = a.data > 0
        return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")
    if kind == "square":
        ad = a.data
        return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, k):
    return elementwise("scalar-mul", a, k)


def relu(a):
    return elementwise("relu", a)


def square(a):
    return elementwise("square", a)


def add_scalar(a, k):
    return _make(a.data + float(k), (a,), lambda g: (g,), "add-scalar")


def clamp(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes where lo <= value <= hi."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def sqrt(a):
    """Square root with a zero subgradient at 0."""
    r = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r > 0, 0.5 * g / safe, 0.0),)

    return _make(r, (a,), vjp, "sqrt")


def l2_norm(a):
    return sqrt(sum_(square(a)))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None):
    shape = a.shape
    if axis is None:
        out = np.array(a.data.sum())

        def vjp(g):
            return (np.full(shape, float(g)),)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        out = a.data.sum(axis=axes)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis), 1.0 / n)


def max_all(a):
    """Global maximum; the gradient goes to the first (row-major) argmax."""
    flat = a.data.reshape(-1)
    i = int(np.argmax(flat))
    shape = a.shape

    def vjp(g):
        out = np.zeros(flat.shape)
        out[i] = float(g)
        return (out.reshape(shape),)

    return _make(np.array(flat[i]), (a,), vjp, "max")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def index(a, key):
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(a.data[key]), (a,), vjp, "index")


def stack_sum(tensors):
    """Sum a list of equally shaped tensors in list order."""
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------- conv / corr

def conv2d(x, w, stride=1):
    """Valid-padding 2D convolution (cross-correlation convention).

    x: C x H x W, w: K x C x R x S  ->  K x H' x W' with
    H' = (H - R) // stride + 1.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects CxHxW input and KxCxRxS kernels, got {x.shape}, {w.shape}")
    C, H, W = x.shape
    K, C2, R, S = w.shape
    if C != C2:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernels {w.shape}")
    if R > H or S > W:
        raise ValueError(f"kernel {w.shape} larger than input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xd, wd, int(stride))

    def vjp(g):
        gx, gw = kernels.conv2d_backward(xd, wd, np.ascontiguousarray(g), int(stride))
        return gx, gw

    return _make(out, (x, w), vjp, "conv2d")


def cross_correlate(exemplar, search):
    """Sliding inner product of exemplar features over search features.

    C x h x w  against  C x H x W  ->  (H - h + 1) x (W - w + 1).
    """
    if exemplar.ndim != 3 or search.ndim != 3 or exemplar.shape[0] != search.shape[0]:
        raise ValueError(f"incompatible feature maps {exemplar.shape} and {search.shape}")
    if exemplar.shape[1] > search.shape[1] or exemplar.shape[2] > search.shape[2]:
        raise ValueError(f"exemplar {exemplar.shape} larger than search {search.shape}")
    k = reshape(exemplar, (1,) + exemplar.shape)
    out = conv2d(search, k, 1)
    return reshape(out, out.shape[1:])


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label] for N x 2 logits."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"logits must be N x 2, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    N = logits.shape[0]
    if labels.shape != (N,):
        raise ValueError(f"need {N} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels > 1)):
        raise ValueError("labels must be 0 or 1")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(N)
    loss = np.array((lse - z[rows, labels]).mean())
    p = np.exp(z - lse[:, None])

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / N),)

    return _make(loss, (logits,), vjp, "softmax-xent")


# ---------------------------------------------------------------- sampling

def bilinear_sample(src, ys, xs, fill=None):
    """Bilinearly sample ``src`` (C x H x W) at float pixel coordinates.

    ``ys``/``xs`` are constant arrays of equal shape (pixel centres at integer
    coordinates).  With ``fill=None`` neighbours outside the image clamp to the
    border; otherwise ``fill`` is a length-C tensor substituted for every
    outside neighbour (and receives gradient).  Returns C x ys.shape.
    """
    C, H, W = src.shape
    out_shape = (C,) + np.shape(ys)
    yf = np.ascontiguousarray(np.asarray(ys, dtype=np.float64).reshape(-1))
    xf = np.ascontiguousarray(np.asarray(xs, dtype=np.float64).reshape(-1))
    sd = np.ascontiguousarray(src.data)
    has_fill = fill is not None
    fd = np.ascontiguousarray(fill.data) if has_fill else None
    out = kernels.bilinear_forward(sd, yf, xf, fd).reshape(out_shape)

    def vjp(g):
        gsrc, gfill = kernels.bilinear_backward(
            np.ascontiguousarray(g.reshape(C, -1)), yf, xf, H, W, has_fill)
        return (gsrc, gfill) if has_fill else (gsrc,)

    parents = (src, fill) if has_fill else (src,)
    return _make(out, parents, vjp, "bilinear")


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for where: {a.shape} vs {b.shape}")
    return _make(np.where(m, a.data, b.data), (a, b),
                 lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)), "where")


def paste(values, mask, base):
    """Write ``values`` (C x N) into the True cells of a 2D ``mask`` over ``base`` (C x H x W)."""
    m = np.asarray(mask, dtype=bool)
    if base.shape[1:] != m.shape or values.shape != (base.shape[0], int(m.sum())):
        raise ValueError(f"paste: values {values.shape} / mask {m.shape} / base {base.shape} disagree")
    out = base.data.copy()
    out[:, m] = values.data

    def vjp(g):
        gb = g.copy()
        gb[:, m] = 0.0
        return g[:, m], gb

    return _make(out, (values, base), vjp, "paste")


# ---------------------------------------------------------------- checking

def numerical_grad(f, x, coords=None, h=1e-5):
    """Central finite differences of scalar ``f(x_array)`` at flat ``coords``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-6):
    """Per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
