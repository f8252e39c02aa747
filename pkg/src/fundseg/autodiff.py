"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation that touches a tensor with ``requires_grad``
records a :class:`Node` carrying a global sequence number. :func:`backward`
collects the nodes reachable from a scalar loss into a :class:`Tape`
ordered by that number and replays it in exact reverse order.

Batched inputs are accepted by the convolutions as (N, C, H, W) in addition
to the single-image (C, H, W) layout. There is no general broadcasting:
binary ops require identical shapes, and Python scalars act as constants.
"""

import contextlib
import itertools
import threading
import weakref

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, EvaluationError

_seq = itertools.count()
_state = threading.local()


def _recording():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "out", "__weakref__")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.out = weakref.ref(out)

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

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
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    live = any(t is not None and t.requires_grad for t in inputs)
    out.requires_grad = live and _recording()
    if out.requires_grad:
        out._node = Node(op, inputs, backward_fn, out)
    return out


class Tape:
    """Nodes reachable from one loss, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        seen = set()
        nodes = []
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t is not None and t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def replay(self, loss):
        """Propagate d(loss)/d(.) through the recorded nodes, last to first."""
        grads = {id(loss._node): np.ones_like(loss.data)}
        leaves = {}
        leaf_grads = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            out = node.out()
            if g is None:
                if out is not None:
                    out.grad = np.zeros_like(out.data)
                continue
            if out is not None:
                out.grad = g
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if t is None or not t.requires_grad:
                    continue
                if gi is None:
                    gi = np.zeros_like(t.data)
                if t._node is not None:
                    key = id(t._node)
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    key = id(t)
                    leaves[key] = t
                    leaf_grads[key] = gi if key not in leaf_grads else leaf_grads[key] + gi
        for key, leaf in leaves.items():
            leaf.grad = np.array(leaf_grads[key], dtype=np.float64).reshape(leaf.shape)


def backward(loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(())
            return Tape([])
        raise ContractError("loss is not on a tape (no input requires grad)")
    tape = Tape.from_loss(loss)
    tape.replay(loss)
    return tape


# --------------------------------------------------------------------------
# elementwise

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.full(b.shape, float(a)))
    if not isinstance(b, Tensor):
        b = Tensor(np.full(a.shape, float(b)))
    if a.shape != b.shape:
        raise DimensionError(f"operand shapes differ: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _binary_operands(a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _binary_operands(a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    q = ad / bd
    return _make("div", q, (a, b), lambda g: (g / bd, -g * q / bd))


def neg(x):
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x):
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def log(x):
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x):
    e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


def clip(x, lo, hi):
    xd = x.data
    keep = (xd >= lo) & (xd <= hi)
    return _make("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * keep,))


def huber(x):
    """0.5 x^2 where |x| < 1, |x| - 0.5 elsewhere."""
    xd = x.data
    ax = np.abs(xd)
    val = np.where(ax < 1.0, 0.5 * xd * xd, ax - 0.5)
    return _make("huber", val, (x,), lambda g: (g * np.clip(xd, -1.0, 1.0),))


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "relu": relu}


def elementwise(op_kind, *operands):
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# reductions and shape

def tsum(x):
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x):
    shape, n = x.shape, x.size
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def logsumexp(x):
    xd = x.data
    m = xd.max()
    e = np.exp(xd - m)
    z = e.sum()
    return _make("logsumexp", np.array(m + np.log(z)), (x,), lambda g: (g * e / z,))


def reshape(x, shape):
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, index):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _make("getitem", np.array(x.data[index]), (x,), bw)


def stack(tensors):
    """Stack equally-shaped tensors along a new leading axis."""
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack operands differ: {shape} vs {t.shape}")
    data = np.stack([t.data for t in tensors])
    return _make("stack", data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


# --------------------------------------------------------------------------
# convolutions

def _check_geometry(stride, padding):
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be non-negative, got {padding}")


def _as_batch(x):
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _pad(a, p):
    if p == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of (C_in,H,W) input with a (C_out,C_in,kH,kW) kernel."""
    _check_geometry(stride, padding)
    xd, batched = _as_batch(x)
    n, cin, h, w = xd.shape
    if kernel.ndim != 4 or kernel.shape[1] != cin:
        raise DimensionError(f"kernel {kernel.shape} does not match input {x.shape}")
    cout, _, kh, kw = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match kernel {kernel.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {(hp, wp)}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _kernels.im2col(_pad(xd, padding), kh, kw, stride, ho, wo)
    wm = kernel.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    if not batched:
        out = out[0]

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g3)
            dxp = _kernels.col2im(dcols, cin, hp, wp, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding : padding + h, padding : padding + w].reshape(x.shape)
        if kernel.requires_grad:
            acc = g3[0] @ cols[0].T
            for b in range(1, n):
                acc += g3[b] @ cols[b].T
            gk = acc.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gk, gb

    return _make("conv2d", out, (x, kernel, bias), bw)


def conv2d_transpose(x, kernel, bias=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv2d` for a (C_in,C_out,kH,kW) kernel.

    Output extent is (H-1)*stride - 2*padding + kH + output_padding. The
    ``output_padding`` term (0 <= output_padding < stride) selects which of
    the conv2d input sizes that map onto H this operation inverts.
    """
    _check_geometry(stride, padding)
    if not 0 <= output_padding < stride:
        raise ContractError(f"output_padding must be in [0, stride), got {output_padding}")
    xd, batched = _as_batch(x)
    n, cin, h, w = xd.shape
    if kernel.ndim != 4 or kernel.shape[0] != cin:
        raise DimensionError(f"kernel {kernel.shape} does not match input {x.shape}")
    _, cout, kh, kw = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match kernel {kernel.shape}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed conv output would be empty for input {x.shape}")
    hp, wp = ho + 2 * padding, wo + 2 * padding

    km = kernel.data.reshape(cin, cout * kh * kw)
    xm = xd.reshape(n, cin, h * w)
    cols = np.matmul(km.T, xm)
    buf = _kernels.col2im(cols, cout, hp, wp, kh, kw, stride, h, w)
    out = np.ascontiguousarray(buf[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[:, None, None]
    if not batched:
        out = out[0]

    def bw(g):
        g4 = g.reshape(n, cout, ho, wo)
        gcols = _kernels.im2col(_pad(g4, padding), kh, kw, stride, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.matmul(km, gcols).reshape(x.shape)
        if kernel.requires_grad:
            acc = xm[0] @ gcols[0].T
            for b in range(1, n):
                acc += xm[b] @ gcols[b].T
            gk = acc.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _make("conv2d_transpose", out, (x, kernel, bias), bw)


# --------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x, h=1e-5):
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if h <= 0:
        raise ContractError(f"step must be positive, got {h}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.ndim != 0:
        raise ContractError(f"f must be scalar-valued, got shape {y.shape}")
    backward(y)
    analytic = xt.grad.ravel()

    numeric = np.empty(x0.size)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy()
            xp.flat[i] += h
            fp = f(Tensor(xp)).item()
            xp.flat[i] = x0.flat[i] - h
            fm = f(Tensor(xp)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"f is not finite at coordinate {i} +/- {h}")
            numeric[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
