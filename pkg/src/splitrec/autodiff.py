"""Tape-based reverse-mode autodiff over dense numpy arrays.

Only the handful of ops the recommender needs are provided. Shapes must match
exactly; the only broadcasting allowed is scalar-with-anything and a row
vector added to every row of a matrix (``add_rows``).
"""
import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class _SparseRows:
    """Gradient contribution to a few rows of an embedding table."""

    __slots__ = ("rows", "values")

    def __init__(self, rows, values):
        self.rows = rows
        self.values = values


class Node:
    __slots__ = ("tape", "idx", "value", "parents", "vjp")

    def __init__(self, tape, idx, value, parents, vjp):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node(#{self.idx}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations.

    Nodes are appended in evaluation order, so reverse append order is a
    valid reverse topological order. With ``grad=False`` nothing is kept for
    the backward pass, which makes the tape a cheap forward evaluator.
    """

    def __init__(self, bank=None, grad=True, dtype=np.float64):
        self.bank = bank
        self.grad = grad
        self.dtype = dtype
        self.nodes = []
        self._params = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, parents=(), vjp=None):
        node = Node(self, len(self.nodes), value, parents, vjp)
        if self.grad:
            self.nodes.append(node)
        return node

    def const(self, value):
        if isinstance(value, Node):
            return value
        return self._record(np.asarray(value, dtype=self.dtype))

    def param(self, name):
        node = self._params.get(name)
        if node is None:
            if self.bank is None:
                raise AutodiffError("tape has no parameter bank")
            value = self.bank[name]
            if value.dtype != self.dtype:
                value = value.astype(self.dtype)
            node = self._record(value)
            self._params[name] = node
        return node

    def embed(self, name, rows):
        """Gather rows of an embedding table; gradient scatters back sparsely."""
        table = self.param(name)
        rows = np.asarray(rows, dtype=np.intp)
        value = table.value[rows]
        return self._record(value, (table,), lambda g: (_SparseRows(rows, g),))

    def backward(self, output):
        """Gradients of scalar ``output`` w.r.t. every parameter in the bank."""
        if not self.grad:
            raise AutodiffError("backward on a tape built with grad=False")
        if output.tape is not self:
            raise AutodiffError("output node belongs to another tape")
        if output.value.shape != ():
            raise AutodiffError(f"backward: output must be scalar, got shape {output.value.shape}")
        if not np.isfinite(output.value):
            raise NonFiniteError(f"backward: non-finite output {float(output.value)}")
        grads = [None] * len(self.nodes)
        grads[output.idx] = np.ones((), dtype=self.dtype)
        sparse = _SparseRows
        for node in reversed(self.nodes[: output.idx + 1]):
            g = grads[node.idx]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                i = parent.idx
                if type(pg) is sparse:
                    acc = grads[i]
                    acc = np.zeros_like(parent.value) if acc is None else acc.copy()
                    np.add.at(acc, pg.rows, pg.values)
                    grads[i] = acc
                elif grads[i] is None:
                    grads[i] = pg
                else:
                    grads[i] = grads[i] + pg
        out = {}
        names = list(self.bank.names()) if self.bank is not None else list(self._params)
        for name in names:
            node = self._params.get(name)
            g = grads[node.idx] if node is not None else None
            if g is None:
                g = np.zeros(self.bank[name].shape, dtype=self.dtype)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"backward: non-finite gradient for {name}")
            out[name] = g
        return out


def _node(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


def _pair(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    return _node(tape, a), _node(tape, b)


def _unbroadcast_scalar(g, shape):
    return g if g.shape == shape else np.sum(g).reshape(shape)


def _check_elementwise(op, a, b):
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(op, sa, sb)


def add(a, b):
    a, b = _pair(a, b)
    _check_elementwise("add", a, b)
    sa, sb = a.value.shape, b.value.shape
    return a.tape._record(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_elementwise("sub", a, b)
    sa, sb = a.value.shape, b.value.shape
    return a.tape._record(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast_scalar(g, sa), -_unbroadcast_scalar(g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_elementwise("mul", a, b)
    av, bv = a.value, b.value
    return a.tape._record(av * bv, (a, b),
                          lambda g: (_unbroadcast_scalar(g * bv, av.shape),
                                     _unbroadcast_scalar(g * av, bv.shape)))


def scale(a, c):
    """Multiply by a python constant (no gradient w.r.t. ``c``)."""
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def add_rows(m, v):
    """Add vector ``v`` to each row of matrix ``m``."""
    m, v = _pair(m, v)
    if m.value.ndim != 2 or v.value.shape != m.value.shape[1:]:
        raise ShapeError("add_rows", m.value.shape, v.value.shape)
    return m.tape._record(m.value + v.value, (m, v), lambda g: (g, g.sum(axis=0)))


def matmul(a, b):
    """Matrix-matrix, matrix-vector, vector-matrix or vector-vector product."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return a.tape._record(av @ bv, (a, b), vjp)


def transpose(a):
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.value.shape)
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def dot(a, b):
    a, b = _pair(a, b)
    if a.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeError("dot", a.value.shape, b.value.shape)
    return matmul(a, b)


def sigmoid(a):
    s = _sigmoid(a.value)
    return a.tape._record(s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a):
    """log(sigmoid(x)) computed without overflow."""
    x = a.value
    out = -np.logaddexp(0.0, -x)
    s = _sigmoid(x)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.value)
    return a.tape._record(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    mask = a.value > 0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    e = np.exp(a.value)
    return a.tape._record(e, (a,), lambda g: (g * e,))


def log(a):
    x = a.value
    if np.any(x <= 0):
        raise AutodiffError("log: non-positive input")
    return a.tape._record(np.log(x), (a,), lambda g: (g / x,))


def total(a):
    """Sum of all entries, as a scalar."""
    shape = a.value.shape
    return a.tape._record(np.sum(a.value), (a,), lambda g: (np.full(shape, g),))


def mean(a):
    n = a.value.size
    shape = a.value.shape
    return a.tape._record(np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),))


def index(a, i):
    """Select element (or row) ``i``."""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return a.tape._record(a.value[i], (a,), vjp)


def concat(parts):
    """Concatenate 1-D nodes (or scalars) into one vector."""
    tape = next(p.tape for p in parts if isinstance(p, Node))
    parts = [_node(tape, p) for p in parts]
    values = [np.atleast_1d(p.value) for p in parts]
    for p, v in zip(parts, values):
        if v.ndim != 1:
            raise ShapeError("concat", *(q.value.shape for q in parts))
    bounds = np.cumsum([0] + [v.size for v in values])
    shapes = [p.value.shape for p in parts]

    def vjp(g):
        return tuple(g[bounds[j]:bounds[j + 1]].reshape(shapes[j]) for j in range(len(parts)))

    return tape._record(np.concatenate(values), tuple(parts), vjp)


def stack(rows):
    """Stack equal-length vectors into a matrix."""
    tape = rows[0].tape
    shapes = {r.value.shape for r in rows}
    if len(shapes) != 1 or rows[0].value.ndim != 1:
        raise ShapeError("stack", *(r.value.shape for r in rows))
    n = len(rows)
    return tape._record(np.stack([r.value for r in rows]), tuple(rows),
                        lambda g: tuple(g[j] for j in range(n)))


def average(nodes):
    """Elementwise mean of a list of equal-shape nodes."""
    tape = nodes[0].tape
    shape = nodes[0].value.shape
    for n in nodes:
        if n.value.shape != shape:
            raise ShapeError("average", *(m.value.shape for m in nodes))
    k = len(nodes)
    value = sum(n.value for n in nodes) / k
    return tape._record(value, tuple(nodes), lambda g: tuple(g / k for _ in range(k)))


def softmax(a, temperature=1.0):
    """Softmax of a 1-D node with a fixed temperature."""
    if a.value.ndim != 1:
        raise ShapeError("softmax", a.value.shape)
    p = _softmax(a.value / temperature)

    def vjp(g):
        return ((p * (g - np.dot(g, p))) / temperature,)

    return a.tape._record(p, (a,), vjp)


def log_softmax(a, temperature=1.0):
    if a.value.ndim != 1:
        raise ShapeError("log_softmax", a.value.shape)
    z = a.value / temperature
    lse = _logsumexp(z)
    p = np.exp(z - lse)

    def vjp(g):
        return ((g - p * np.sum(g)) / temperature,)

    return a.tape._record(z - lse, (a,), vjp)


def gru_cell(x, h, w, u, b):
    """One GRU step: h' = (1 - z) * n + z * h.

    ``w`` is (n_in, 3d), ``u`` is (d, 3d), ``b`` is (3d,); gate blocks are
    ordered update, reset, candidate. The reset gate multiplies the
    recurrent candidate term: n = tanh(x w_n + b_n + r * (h u_n)).
    """
    xv, hv, wv, uv, bv = x.value, h.value, w.value, u.value, b.value
    d = hv.shape[0]
    if (xv.ndim != 1 or hv.ndim != 1 or wv.shape != (xv.shape[0], 3 * d)
            or uv.shape != (d, 3 * d) or bv.shape != (3 * d,)):
        raise ShapeError("gru_cell", xv.shape, hv.shape, wv.shape, uv.shape, bv.shape)
    gx = xv @ wv + bv
    gh = hv @ uv
    z = _sigmoid(gx[:d] + gh[:d])
    r = _sigmoid(gx[d:2 * d] + gh[d:2 * d])
    hn = gh[2 * d:]
    n = np.tanh(gx[2 * d:] + r * hn)
    out = (1.0 - z) * n + z * hv

    def vjp(g):
        dz = g * (hv - n)
        da_n = g * (1.0 - z) * (1.0 - n * n)
        da_r = da_n * hn * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dgx = np.concatenate([da_z, da_r, da_n])
        dgh = np.concatenate([da_z, da_r, da_n * r])
        return (wv @ dgx, g * z + uv @ dgh, np.outer(xv, dgx), np.outer(hv, dgh), dgx)

    return x.tape._record(out, (x, h, w, u, b), vjp)


def time_input(item, dt, time_w, time_b):
    """[item ; time_w * dt + time_b] for a constant gap ``dt``."""
    iv = item.value
    if iv.ndim != 1 or time_w.value.shape != time_b.value.shape or time_w.value.ndim != 1:
        raise ShapeError("time_input", iv.shape, time_w.value.shape, time_b.value.shape)
    n = iv.shape[0]
    dt = float(dt)
    value = np.concatenate([iv, time_w.value * dt + time_b.value])

    def vjp(g):
        gt = g[n:]
        return g[:n], gt * dt, gt

    return item.tape._record(value, (item, time_w, time_b), vjp)


def mlp_scores(ctx, item, w1c, w1e, b1, w2, b2, w3, b3):
    """sigmoid(relu(relu(ctx w1c + item w1e + b1) w2 + b2) w3 + b3), per row of ``ctx``.

    Equivalent to a three-layer perceptron applied to [ctx_row ; item].
    """
    C, e = ctx.value, item.value
    W1c, W1e, B1, W2, B2, W3, B3 = (p.value for p in (w1c, w1e, b1, w2, b2, w3, b3))
    if (C.ndim != 2 or e.ndim != 1 or W1c.shape[0] != C.shape[1] or W1e.shape[0] != e.shape[0]
            or W1c.shape[1] != W1e.shape[1] or W2.shape[0] != W1c.shape[1] or W3.shape != W2.shape[1:]):
        raise ShapeError("mlp_scores", C.shape, e.shape, W1c.shape, W1e.shape, W2.shape, W3.shape)
    a1 = C @ W1c + (e @ W1e + B1)
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ W2 + B2
    h2 = np.maximum(a2, 0.0)
    out = _sigmoid(h2 @ W3 + B3)

    def vjp(g):
        d3 = g * out * (1.0 - out)
        da2 = np.outer(d3, W3) * (a2 > 0)
        da1 = (da2 @ W2.T) * (a1 > 0)
        s1 = da1.sum(axis=0)
        return (da1 @ W1c.T, W1e @ s1, C.T @ da1, np.outer(e, s1), s1,
                h1.T @ da2, da2.sum(axis=0), h2.T @ d3, np.sum(d3).reshape(B3.shape))

    return ctx.tape._record(out, (ctx, item, w1c, w1e, b1, w2, b2, w3, b3), vjp)


def _sigmoid(x):
    # tanh form is overflow-free and a single ufunc call
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logsumexp(z):
    m = np.max(z)
    return m + np.log(np.sum(np.exp(z - m)))


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


# numpy twins used on no-grad paths
np_sigmoid = _sigmoid
np_softmax = _softmax
np_logsumexp = _logsumexp
