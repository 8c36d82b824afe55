"""Double-precision tensors with a dynamic reverse-mode tape.

Each op produces a new :class:`Tensor` that remembers its parents and a
local backward rule. Node ids are drawn from a global counter, so sorting
the nodes reachable from a root by descending id is a valid reverse
topological order; that ordering is the tape replayed by :func:`backward`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = _parents
        self.backward_fn = _backward
        self.node_id = next(_ids)
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op, data, parents, backward):
    """Wrap ``data`` as the output of ``op``.

    ``backward(g)`` must return one gradient (or ``None``) per parent. Raises
    ``FloatingPointError`` if the forward value is not finite.
    """
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward result")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(x):
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    y = _sigmoid(x.data)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    pos = x.data > 0
    return record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", y, (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", y, (x,), bw)


# ---------------------------------------------------------------- structure

def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return record("matmul", y, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` for ``x`` of any leading shape and a 2-d ``w``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record("linear", y, parents, bw)


def reshape(x, shape):
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record("transpose", y, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    y = x.data[idx]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("slice", np.array(y, copy=True), (x,), bw)


def concat(xs, axis=-1):
    xs = [as_tensor(t) for t in xs]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in xs)) from None
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", y, xs, bw)


def stack(xs, axis=0):
    xs = [as_tensor(t) for t in xs]
    try:
        y = np.stack([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + ", ".join(str(t.shape) for t in xs)) from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return record("stack", y, xs, bw)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    y = weight.data[ids]

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return record("embedding", y, (weight,), bw)


# ---------------------------------------------------------------- convolution

def conv2d_3x3(x, w, b):
    """Same-padded 3x3 convolution. ``x``: (B, Cin, T, F); ``w``: (Cout, Cin, 3, 3)."""
    if x.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"conv2d_3x3: input {x.shape} does not match kernel {w.shape}")
    B, C, T, F = x.shape
    O = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, T, F, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * T * F, C * 9)
    wm = w.data.reshape(O, C * 9)
    y = (cols @ wm.T + b.data).reshape(B, T, F, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * T * F, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gc = (g2 @ wm).reshape(B, T, F, C, 3, 3)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + T, j:j + F] += gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return record("conv2d_3x3", np.ascontiguousarray(y), (x, w, b), bw)


def max_pool2d(x):
    """2x2 max pooling with stride 2 and ceiling division on both axes."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (B, C, T, F), got {x.shape}")
    B, C, T, F = x.shape
    T2, F2 = -(-T // 2), -(-F // 2)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 2 * T2 - T), (0, 2 * F2 - F)), constant_values=-np.inf)
    blocks = xp.reshape(B, C, T2, 2, F2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, T2, F2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((B, C, T2, F2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gxp = gb.reshape(B, C, T2, F2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * T2, 2 * F2)
        return (gxp[:, :, :T, :F],)

    return record("max_pool2d", y, (x,), bw)


def conv1d_same(x, w):
    """Same-padded 1-d convolution of ``x`` (B, T) with ``w`` (C, K), K odd -> (B, T, C)."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] % 2 != 1:
        raise ShapeError(f"conv1d_same: input {x.shape} and kernel {w.shape} unsupported")
    B, T = x.shape
    K = w.shape[1]
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    win = sliding_window_view(xp, K, axis=1)  # (B, T, K)
    y = win @ w.data.T

    def bw(g):
        gw = np.einsum("btk,btc->ck", win, g)
        gx = None
        if x.requires_grad:
            gwin = g @ w.data  # (B, T, K)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + T] += gwin[:, :, k]
            gx = gxp[:, pad:pad + T]
        return gx, gw

    return record("conv1d_same", y, (x, w), bw)


# ---------------------------------------------------------------- recurrent

def _lstm_gates(z, H):
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    return i, f, gg, o


def _lstm_gate_grads(dh, dc_in, c_prev, cache):
    i, f, gg, o, tc = cache
    do = dh * tc
    dc = dc_in + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([dc * gg * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                         dc * i * (1.0 - gg * gg), do * o * (1.0 - o)], axis=1)
    return dz, dc * f


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step (gate order i, f, g, o). Returns (B, 2H): new ``[h, c]``."""
    H = wh.shape[0]
    if x.shape[1] != wx.shape[0] or wx.shape[1] != 4 * H or h.shape[1] != H or c.shape[1] != H:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, wx {wx.shape}, wh {wh.shape}")
    z = x.data @ wx.data + h.data @ wh.data + b.data
    i, f, gg, o = _lstm_gates(z, H)
    c2 = f * c.data + i * gg
    tc = np.tanh(c2)
    h2 = o * tc
    cache = (i, f, gg, o, tc)

    def bw(g):
        dz, dc_prev = _lstm_gate_grads(g[:, :H], g[:, H:], c.data, cache)
        return (dz @ wx.data.T, dz @ wh.data.T, dc_prev, x.data.T @ dz, h.data.T @ dz, dz.sum(axis=0))

    return record("lstm_cell", np.concatenate([h2, c2], axis=1), (x, h, c, wx, wh, b), bw)


def lstm_sequence(x, wx, wh, b):
    """Unidirectional LSTM over (B, T, I) from a zero state; returns hidden states (B, T, H)."""
    if x.ndim != 3 or x.shape[2] != wx.shape[0]:
        raise ShapeError(f"lstm_sequence: input {x.shape} does not match weight {wx.shape}")
    B, T, _ = x.shape
    H = wh.shape[0]
    xz = x.data @ wx.data + b.data  # (B, T, 4H)
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    caches = []
    for t in range(T):
        z = xz[:, t] + hs[:, t] @ wh.data
        i, f, gg, o = _lstm_gates(z, H)
        cs[:, t + 1] = f * cs[:, t] + i * gg
        tc = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tc
        caches.append((i, f, gg, o, tc))

    def bw(g):
        dz_all = np.zeros((B, T, 4 * H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dz, dc = _lstm_gate_grads(dh + g[:, t], dc, cs[:, t], caches[t])
            dz_all[:, t] = dz
            dh = dz @ wh.data.T
        dz2 = dz_all.reshape(B * T, 4 * H)
        gx = (dz2 @ wx.data.T).reshape(x.shape) if x.requires_grad else None
        gwx = x.data.reshape(B * T, -1).T @ dz2
        gwh = hs[:, :T].reshape(B * T, H).T @ dz2
        return gx, gwx, gwh, dz2.sum(axis=0)

    return record("lstm_sequence", hs[:, 1:].copy(), (x, wx, wh, b), bw)


# ---------------------------------------------------------------- backward

def backward(root, params=None):
    """Reverse-mode sweep from a scalar ``root``.

    Gradients are accumulated into ``.grad`` of every reachable leaf that
    requires grad. When ``params`` is given, parameters the root does not
    depend on get a zero gradient. Returns ``{leaf: grad}``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    reached = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.node_id in reached or not node.requires_grad:
            continue
        reached[node.node_id] = node
        stack_.extend(node.parents)
    grads = {root.node_id: np.ones_like(root.data)}
    out = {}
    for nid in sorted(reached, reverse=True):
        node = reached[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            out[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.node_id
            grads[pid] = grads[pid] + pg if pid in grads else pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.setdefault(p, p.grad)
    return out
