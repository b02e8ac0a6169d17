"""A small reverse-mode autodiff over dense float64 arrays.

Only what the rest of the package needs: affine maps (matrix-vector, batched
over leading rows), elementwise arithmetic on same-shape operands, ReLU and
clamps, sums, min/max and a fused softmax cross-entropy. There is no general
broadcasting. A ``Tensor`` is immutable; operations build a graph that
``gradient`` walks backwards. An active ``Tape`` additionally records every
node in creation order so the forward pass can be replayed.

>>> x = Tensor([-1.0, 2.0], requires_grad=True)
>>> gradient(sum_(relu(x)), [x])[0]
array([0., 1.])
"""
import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_TAPES = []


class Tensor:
    """Immutable float64 array with an optional autodiff history."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_forward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _forward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._forward = _forward
        self.op = op
        if _TAPES and (requires_grad or _parents):
            _TAPES[-1].nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, forward, op):
    parents = tuple(parents)
    track = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=track, _parents=parents if track else (),
                  _backward=backward if track else None, _forward=forward, op=op)


def _same_shape(a, b, op):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g, shape):
    # scalar operands combined with arrays
    if shape == g.shape:
        return g
    return np.asarray(np.sum(g)).reshape(shape)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def fwd(x, y):
        return x + y

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _node(fwd(a.data, b.data), (a, b), bwd, fwd, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")

    def fwd(x, y):
        return x - y

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _node(fwd(a.data, b.data), (a, b), bwd, fwd, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def fwd(x, y):
        return x * y

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)
    return _node(fwd(a.data, b.data), (a, b), bwd, fwd, "mul")


def neg(a):
    a = as_tensor(a)

    def fwd(x):
        return -x
    return _node(fwd(a.data), (a,), lambda g: (-g,), fwd, "neg")


def scale(a, c):
    """Multiply by a python/numpy scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def fwd(x):
        return c * x
    return _node(fwd(a.data), (a,), lambda g: (c * g,), fwd, "scale")


def relu(a):
    """``max(a, 0)`` with subgradient 0 at the kink."""
    a = as_tensor(a)

    def fwd(x):
        return np.maximum(x, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)
    return _node(fwd(a.data), (a,), bwd, fwd, "relu")


def neg_part(a):
    """``min(a, 0)``."""
    a = as_tensor(a)

    def fwd(x):
        return np.minimum(x, 0.0)

    def bwd(g):
        return (g * (a.data < 0.0),)
    return _node(fwd(a.data), (a,), bwd, fwd, "neg_part")


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi

    def fwd(x):
        return np.clip(x, lo_v, hi_v)

    def bwd(g):
        return (g * ((a.data > lo_v) & (a.data < hi_v)),)
    return _node(fwd(a.data), (a,), bwd, fwd, "clamp")


def abs_(a):
    """Absolute value; sign(0) is taken as 0."""
    a = as_tensor(a)

    def fwd(x):
        return np.abs(x)
    return _node(fwd(a.data), (a,), lambda g: (g * np.sign(a.data),), fwd, "abs")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")

    def fwd(x, y):
        return np.minimum(x, y)

    def bwd(g):
        pick_a = a.data <= b.data
        return g * pick_a, g * ~pick_a
    return _node(fwd(a.data, b.data), (a, b), bwd, fwd, "minimum")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")

    def fwd(x, y):
        return np.maximum(x, y)

    def bwd(g):
        pick_a = a.data >= b.data
        return g * pick_a, g * ~pick_a
    return _node(fwd(a.data, b.data), (a, b), bwd, fwd, "maximum")


# -- linear algebra -----------------------------------------------------------

def affine(W, x, b=None):
    """``W x + b`` for a vector ``x``, or row-wise for a batch ``x`` of shape (B, d)."""
    W, x = as_tensor(W), as_tensor(x)
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: W {W.shape} does not conform with x {x.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"affine: bias {b.shape} does not match {W.shape[0]} outputs")
    batched = x.data.ndim == 2

    def fwd(Wv, xv, bv=None):
        out = xv @ Wv.T
        return out if bv is None else out + bv

    def bwd(g):
        if batched:
            gW = g.T @ x.data
            gb = g.sum(axis=0)
        else:
            gW = np.outer(g, x.data)
            gb = g
        gx = g @ W.data
        return (gW, gx) if b is None else (gW, gx, gb)

    parents = (W, x) if b is None else (W, x, b)
    return _node(fwd(*(p.data for p in parents)), parents, bwd, fwd, "affine")


def transpose(W):
    W = as_tensor(W)
    if W.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")

    def fwd(x):
        return x.T.copy()
    return _node(fwd(W.data), (W,), lambda g: (g.T,), fwd, "transpose")


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def fwd(x):
        return np.sum(x, axis=axis)

    def bwd(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _node(fwd(a.data), (a,), bwd, fwd, "sum")


def mean(a):
    return scale(sum_(a), 1.0 / a.size)


def reduce_min(a, axis=None):
    """Min reduction; the gradient goes to the first minimising entry."""
    return _extremum(a, axis, np.argmin, "reduce_min")


def reduce_max(a, axis=None):
    return _extremum(a, axis, np.argmax, "reduce_max")


def _extremum(a, axis, argfn, op):
    a = as_tensor(a)
    shape = a.shape
    reducer = np.min if argfn is np.argmin else np.max

    def fwd(x):
        return reducer(x, axis=axis)

    def bwd(g):
        out = np.zeros(shape)
        if axis is None:
            out[np.unravel_index(argfn(a.data), shape)] = float(g)
        else:
            idx = np.expand_dims(argfn(a.data, axis=axis), axis)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)
    return _node(fwd(a.data), (a,), bwd, fwd, op)


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of (B, o) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy expects (B, o) logits and B labels")
    rows = np.arange(labels.size)

    def per_sample(z):
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        return lse - z[rows, labels]

    def fwd(z):
        ce = per_sample(z)
        return ce.mean() if reduction == "mean" else ce

    def bwd(g):
        z = logits.data
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        if reduction == "mean":
            return (p * (float(g) / labels.size),)
        return (p * g[:, None],)
    return _node(fwd(logits.data), (logits,), bwd, fwd, "cross_entropy")


# -- differentiation ----------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def gradient(output, wrt):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get exact zeros.
    """
    if output.data.ndim != 0:
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    grads = {id(output): np.ones(())}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape))
    for g in out:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    return out


class Tape:
    """Records tracked nodes in creation order while active.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, -2.0], requires_grad=True)
    ...     y = sum_(relu(x))
    >>> tape.replay_matches()
    True
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Recompute every recorded node from leaf values, in recorded order."""
        values = {}
        for node in self.nodes:
            if node._forward is None or not node._parents:
                values[id(node)] = node.data
                continue
            args = [values.get(id(p), p.data) for p in node._parents]
            values[id(node)] = np.asarray(node._forward(*args), dtype=np.float64)
        return values

    def replay_matches(self):
        values = self.replay()
        return all(np.array_equal(values[id(n)], n.data) for n in self.nodes)


def finite_difference_check(f, theta, h=1e-5):
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a list of Tensors (shaped like ``theta``) to a scalar Tensor.
    """
    theta = [np.array(t, dtype=np.float64) for t in theta]
    leaves = [Tensor(t, requires_grad=True) for t in theta]
    analytic = gradient(f(leaves), leaves)
    worst = 0.0
    for i, base in enumerate(theta):
        flat = base.reshape(-1)
        for j in range(flat.size):
            vals = []
            for step in (h, -h):
                pert = [t.copy() for t in theta]
                pert[i].reshape(-1)[j] += step
                vals.append(f([Tensor(p) for p in pert]).item())
            fd = (vals[0] - vals[1]) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
