"""
Small reverse-mode autodiff engine over float64 numpy arrays.

Every op takes and returns :class:`Tensor` nodes.  A node holds its forward
value, the parents it was computed from and a closure mapping the upstream
gradient to per-parent gradients.  ``backward`` walks the graph in reverse
topological order and accumulates gradients into ``node.grad``.

Shape rules (row-vector convention, batch dimension first):

    matmul      (..., k) @ (k, n)            -> (..., n)
    add/sub/mul numpy broadcasting           -> broadcast shape
    concat      equal off-axis dims          -> joined along one axis
    slice       index along the last axis
    stack       equal shapes, new axis 1
    layer_norm  (..., n) with gain/bias broadcastable to (..., n)
"""

from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_CHECKED = False


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextmanager
def checked(enabled=True):
    """Turn shape/NaN/domain validation on (or off) inside the block."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = previous


def is_checked():
    return _CHECKED


def as_array(data):
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise DomainError("array contains NaN or Inf")
    return arr


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE else as_array(value)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor<{self.op}{label} shape={self.shape}>"

    def item(self):
        return float(self.value.item())

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None):
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def constant(value):
    return Tensor(value)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op):
    if _CHECKED and not np.all(np.isfinite(value)):
        raise DomainError(f"{op}: produced NaN or Inf")
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, parents, backward_fn, op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if _CHECKED:
        _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    if _CHECKED:
        _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    if _CHECKED:
        _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = g @ bv.T if need_a else None
        gb = None
        if need_b:
            a2 = av.reshape(-1, av.shape[-1]) if av.ndim > 1 else av[None, :]
            gb = a2.T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _node(av @ bv, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops


def tanh(x):
    x = _wrap(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    x = _wrap(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = _wrap(x)
    y = np.exp(x.value)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def expm1(x):
    """exp(x) - 1, accurate near 0."""
    x = _wrap(x)
    return _node(np.expm1(x.value), (x,), lambda g: (g * np.exp(x.value),), "expm1")


def log(x):
    x = _wrap(x)
    xv = x.value
    if _CHECKED and np.any(xv <= 0):
        raise DomainError("log: non-positive input")
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def sqrt(x):
    x = _wrap(x)
    xv = x.value
    if _CHECKED and np.any(xv <= 0):
        raise DomainError("sqrt: non-positive input")
    y = np.sqrt(xv)
    return _node(y, (x,), lambda g: (0.5 * g / y,), "sqrt")


def absolute(x):
    x = _wrap(x)
    xv = x.value
    return _node(np.abs(xv), (x,), lambda g: (g * np.sign(xv),), "abs")


def square(x):
    x = _wrap(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    x = _wrap(x)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _node(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = _wrap(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.value.sum(axis=axis), dtype=DTYPE), (x,), backward, "sum")


def mean(x, axis=None):
    x = _wrap(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def norm(x):
    """Euclidean norm over the last axis.  Gradient at the origin is taken as 0."""
    x = _wrap(x)
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (xv * scale[..., None],)

    return _node(n, (x,), backward, "norm")


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis=-1):
    """Join along ``axis`` (the last axis by default)."""
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].value.ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.value.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _node(np.concatenate([t.value for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def slice_last(x, start, stop):
    """``x[..., start:stop]``."""
    x = _wrap(x)
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside last axis of shape {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[..., start:stop] = g
        return (out,)

    return _node(x.value[..., start:stop], (x,), backward, "slice")


def index(x, key):
    """General basic indexing ``x[key]`` (e.g. selecting a time step)."""
    x = _wrap(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return _node(np.array(x.value[key], dtype=DTYPE), (x,), backward, "index")


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node(y, (x,), lambda g: (g.reshape(old),), "reshape")


def stack(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"stack: shapes {first} and {t.shape} differ")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# layers


def layer_norm(x, gain, bias, epsilon=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xv = x.value
    n = xv.shape[-1]
    if _CHECKED and n < 2:
        raise ShapeError(f"layer_norm: last axis of length {n} has degenerate variance")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value
    if _CHECKED and not np.all(np.isfinite(out)):
        raise DomainError("layer_norm: produced NaN or Inf (zero variance with epsilon=0?)")

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = _layer_norm_input_grad(g * gv, xhat, inv)
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), backward, "layer_norm")


def _layer_norm_input_grad(gx_hat, xhat, inv):
    return inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                  - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))


def lstm_cell(x, h, c, Wx, Wh, b, gain=None, epsilon=1e-5):
    """Fused LSTM transition; returns one node holding ``[h', c']`` on the last axis.

    Gate order is (input, forget, candidate, output).  With ``gain`` given,
    each gate block of the pre-activation is layer-normalized, scaled by its
    slice of ``gain`` and shifted by ``b``; otherwise ``b`` is added directly.
    """
    x, h, c, Wx, Wh, b = (_wrap(t) for t in (x, h, c, Wx, Wh, b))
    H = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0] or Wx.shape[1] != 4 * H or h.shape[-1] != H or c.shape != h.shape:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} do not match "
                         f"Wx {Wx.shape}, Wh {Wh.shape}")
    xv, hv, cv = x.value, h.value, c.value
    pre = xv @ Wx.value + hv @ Wh.value
    lead = pre.shape[:-1]
    if gain is not None:
        gain = _wrap(gain)
        blocks = pre.reshape(lead + (4, H))
        mu = blocks.mean(axis=-1, keepdims=True)
        xc = blocks - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + epsilon)
        xhat = xc * inv
        act = (xhat * gain.value.reshape(4, H) + b.value.reshape(4, H)).reshape(lead + (4 * H,))
    else:
        act = pre + b.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * act))
    i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 3 * H:]
    g = np.tanh(act[..., 2 * H:3 * H])
    c_new = f * cv + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)
    parents = (x, h, c, Wx, Wh, b) + ((gain,) if gain is not None else ())

    def backward(G):
        gh, gc = G[..., :H], G[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        da = np.concatenate([dc * g * i * (1.0 - i),
                             dc * cv * f * (1.0 - f),
                             dc * i * (1.0 - g * g),
                             gh * tc * o * (1.0 - o)], axis=-1)
        flat = da.reshape(-1, 4 * H)
        grads_gain = None
        if gain is not None:
            da_blocks = da.reshape(lead + (4, H))
            gb = da_blocks.reshape(-1, 4 * H).sum(axis=0)
            grads_gain = (da_blocks * xhat).reshape(-1, 4 * H).sum(axis=0)
            dpre = _layer_norm_input_grad(da_blocks * gain.value.reshape(4, H), xhat, inv).reshape(lead + (4 * H,))
        else:
            gb = flat.sum(axis=0)
            dpre = da
        dflat = dpre.reshape(-1, 4 * H)
        gx = dpre @ Wx.value.T if x.requires_grad else None
        gh_prev = dpre @ Wh.value.T if h.requires_grad else None
        gc_prev = dc * f if c.requires_grad else None
        gWx = xv.reshape(-1, xv.shape[-1]).T @ dflat if Wx.requires_grad else None
        gWh = hv.reshape(-1, H).T @ dflat if Wh.requires_grad else None
        grads = (gx, gh_prev, gc_prev, gWx, gWh, gb.reshape(b.shape))
        return grads + ((grads_gain.reshape(gain.shape),) if gain is not None else ())

    return _node(out, parents, backward, "lstm_cell")


def dropout(x, keep_probability, rng, training=True):
    """Inverted dropout: survivors are scaled by ``1/keep_probability``."""
    if not 0.0 < keep_probability <= 1.0:
        raise ValueError(f"keep_probability must be in (0, 1], got {keep_probability}")
    x = _wrap(x)
    if not training or keep_probability == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_probability) / keep_probability
    return mul(x, mask)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, seed=None):
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Returns a dict mapping node -> gradient array.  ``root`` must be scalar
    unless an explicit upstream ``seed`` of matching shape is given.
    """
    if seed is None:
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        seed = np.ones_like(root.value)
    order = _toposort(root)
    grads = {id(root): np.asarray(seed, dtype=DTYPE)}
    out = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        out[node] = node.grad
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def grad(root, leaves):
    """Gradients of a scalar ``root`` w.r.t. ``leaves``; unreached leaves get zeros."""
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
