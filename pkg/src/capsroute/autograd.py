"""Reverse-mode differentiation on numpy arrays.

Every op here dispatches on its arguments: plain ndarrays flow straight
through numpy (zero tracing overhead), while `Var` arguments additionally
record the node needed for the backward sweep.  Forward values are computed
by the same numpy calls either way, so a traced run is bitwise identical to
an untraced one.

Routing iterations and network layers are differentiated by full unrolling;
there is no implicit-function shortcut.  The registered op set is what
appears in this module — anything else applied to a `Var` raises
UnsupportedOpError.
"""

import itertools

import numpy as np

from .errors import NumericError, ShapeError, UnsupportedOpError


class Var:
    """A node in the reverse-mode graph: a value plus how to push gradients
    back to its parents."""

    __slots__ = ("value", "parents", "vjp", "op", "serial")
    _counter = itertools.count()

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.serial = next(Var._counter)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    def __repr__(self):
        return f"Var#{self.serial}({self.op}, shape={self.shape})"

    # Arithmetic conveniences route through the registered ops.
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

    # Block silent numpy coercion: an unregistered op has no backward rule.
    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError(
            f"{self!r} used in an operation outside the registered op set")

    def __array_ufunc__(self, *args, **kwargs):
        raise UnsupportedOpError(
            f"{self!r} used in a numpy ufunc outside the registered op set")


def val(x):
    """Underlying ndarray/scalar of ``x`` (identity for non-Vars)."""
    return x.value if isinstance(x, Var) else x


def _is_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, out, da, db, op):
    if not _is_var(a, b):
        return out
    ash, bsh = np.shape(val(a)), np.shape(val(b))
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(da(g), ash))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(db(g), bsh))
    return Var(out, tuple(parents), lambda g: [r(g) for r in rules], op)


def _unary(x, out, dx, op):
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: [dx(g)], op)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    out = val(a) + val(b)
    return _binary(a, b, out, lambda g: g, lambda g: g, "add")


def sub(a, b):
    out = val(a) - val(b)
    return _binary(a, b, out, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    return _binary(a, b, out, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv,
                   lambda g: -g * av / (bv * bv), "div")


def neg(x):
    return _unary(x, -val(x), lambda g: -g, "neg")


def exp(x):
    out = np.exp(val(x))
    return _unary(x, out, lambda g: g * out, "exp")


def log(x):
    xv = val(x)
    return _unary(x, np.log(xv), lambda g: g / xv, "log")


def sigmoid(x):
    xv = val(x)
    positive = xv >= 0
    z = np.exp(np.where(positive, -xv, xv))
    out = np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z))
    return _unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def relu(x):
    xv = val(x)
    out = np.maximum(xv, 0)
    # Subgradient 0 at the kink, consistent with the kernel-profile choice.
    return _unary(x, out, lambda g: g * (xv > 0), "relu")


def absolute(x):
    xv = val(x)
    return _unary(x, np.abs(xv), lambda g: g * np.sign(xv), "abs")


def where(cond, a, b):
    """Non-differentiable switch: ``cond`` is a plain boolean array."""
    cond = np.asarray(val(cond), dtype=bool)
    out = np.where(cond, val(a), val(b))
    return _binary(a, b, out, lambda g: g * cond, lambda g: g * ~cond, "where")


# --- reductions and shape --------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    xv = val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = np.shape(xv)

    def dx(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % len(shape) for ax in axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape).copy()

    return Var(out, (x,), lambda g: [dx(g)], "reduce_sum")


def mean(x, axis=None, keepdims=False):
    xv = val(x)
    n = xv.size if axis is None else np.prod(
        [xv.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims),
               np.asarray(1.0 / n, dtype=np.asarray(xv).dtype))


def reshape(x, shape):
    xv = val(x)
    out = np.reshape(xv, shape)
    return _unary(x, out, lambda g: np.reshape(g, np.shape(xv)), "reshape")


def transpose(x, axes):
    xv = val(x)
    out = np.transpose(xv, axes)
    inverse = np.argsort(axes)
    return _unary(x, out, lambda g: np.transpose(g, inverse), "transpose")


def getitem(x, index):
    xv = val(x)
    out = xv[index]

    def dx(g):
        grad = np.zeros_like(xv)
        grad[index] = g
        return grad

    return _unary(x, out, dx, "getitem")


def take_per_row(x, idx):
    """Pick one column per row of a 2-D tensor: out[i] = x[i, idx[i]]."""
    xv = val(x)
    idx = np.asarray(val(idx), dtype=np.intp)
    rows = np.arange(xv.shape[0])
    out = xv[rows, idx]

    def dx(g):
        grad = np.zeros_like(xv)
        grad[rows, idx] = g
        return grad

    return _unary(x, out, dx, "take_per_row")


# --- fused contractions -----------------------------------------------------

def sum_over_inputs_weighted(w, x):
    """out[b,j,d] = sum_i w[b,i,j] * x[b,i,j,d] (single fused pass)."""
    wv, xv = val(w), val(x)
    out = np.einsum("bij,bijd->bjd", wv, xv)
    return _binary(w, x, out,
                   lambda g: np.einsum("bjd,bijd->bij", g, xv),
                   lambda g: wv[..., None] * g[:, None, :, :],
                   "sum_over_inputs_weighted")


def dot_over_dims(x, y):
    """out[b,i,j] = sum_d x[b,i,j,d] * y[b,j,d] (single fused pass)."""
    xv, yv = val(x), val(y)
    out = np.einsum("bijd,bjd->bij", xv, yv)
    return _binary(x, y, out,
                   lambda g: g[..., None] * yv[:, None, :, :],
                   lambda g: np.einsum("bij,bijd->bjd", g, xv),
                   "dot_over_dims")


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    av, bv = val(a), val(b)
    out = av @ bv

    def swap(m):
        return np.swapaxes(m, -1, -2)

    return _binary(a, b, out,
                   lambda g: g @ swap(bv),
                   lambda g: swap(av) @ g,
                   "matmul")


def softmax(x, axis=-1):
    xv = val(x)
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def dx(g):
        # Fused Jacobian-vector form; the Jacobian is never materialized.
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - inner)

    return _unary(x, out, dx, "softmax")


def log_softmax(x, axis=-1):
    xv = val(x)
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def dx(g):
        return g - np.exp(out) * np.sum(g, axis=axis, keepdims=True)

    return _unary(x, out, dx, "log_softmax")


def conv2d_same(x, kernels):
    """Stride-1, same-padding cross-correlation.

    x: [B, H, W, Cin], kernels: [kh, kw, Cin, Cout] -> [B, H, W, Cout].
    """
    xv, kv = val(x), val(kernels)
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[3] != kv.shape[2]:
        raise ShapeError(f"conv2d_same shapes disagree: {xv.shape} vs {kv.shape}")
    batch, height, width, cin = xv.shape
    kh, kw, _, cout = kv.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(xv, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # cols: [B, H, W, Cin, kh, kw] -> [B*H*W, kh*kw*Cin]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3))
    cols2 = cols.reshape(batch * height * width, kh * kw * cin)
    kmat = kv.reshape(kh * kw * cin, cout)
    out = (cols2 @ kmat).reshape(batch, height, width, cout)
    if not _is_var(x, kernels):
        return out

    parents, rules = [], []
    if isinstance(x, Var):
        def dx(g):
            gcols = g.reshape(batch * height * width, cout) @ kmat.T
            gcols = gcols.reshape(batch, height, width, kh, kw, cin)
            gpad = np.zeros_like(padded)
            for dy in range(kh):
                for dx_ in range(kw):
                    gpad[:, dy:dy + height, dx_:dx_ + width, :] += gcols[:, :, :, dy, dx_, :]
            return gpad[:, ph:ph + height, pw:pw + width, :]
        parents.append(x)
        rules.append(dx)
    if isinstance(kernels, Var):
        def dk(g):
            gk = cols2.T @ g.reshape(batch * height * width, cout)
            return gk.reshape(kh, kw, cin, cout)
        parents.append(kernels)
        rules.append(dk)
    return Var(out, tuple(parents), lambda g: [r(g) for r in rules], "conv2d_same")


def max_pool_2x2(x):
    """2x2/stride-2 max pooling over [B, H, W, C]; ties route to the first
    window position."""
    xv = val(x)
    batch, height, width, channels = xv.shape
    if height % 2 or width % 2:
        raise ShapeError(f"max_pool_2x2 needs even extents, got {xv.shape}")
    h2, w2 = height // 2, width // 2
    windows = xv.reshape(batch, h2, 2, w2, 2, channels)
    windows = np.ascontiguousarray(windows.transpose(0, 1, 3, 5, 2, 4))
    flat = windows.reshape(batch, h2, w2, channels, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if not isinstance(x, Var):
        return out

    def dx(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gwin = gflat.reshape(batch, h2, w2, channels, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return gwin.reshape(batch, height, width, channels)

    return Var(out, (x,), lambda g: [dx(g)], "max_pool_2x2")


# --- tape API ---------------------------------------------------------------

class Tape:
    """A finished forward trace: the loss node plus the parameter leaves."""

    def __init__(self, output, params):
        self.output = output
        self.params = params


def record_forward(program, params, *inputs):
    """Run ``program(params, *inputs)`` with parameters wrapped as graph
    leaves.  Returns (output value, Tape).  The value is bitwise equal to the
    untraced run."""
    leaves = {name: Var(np.asarray(value), op=f"param:{name}")
              for name, value in params.items()}
    out = program(leaves, *inputs)
    if not isinstance(out, Var):
        raise UnsupportedOpError("program output does not depend on any parameter")
    return out.value, Tape(out, leaves)


def backward(tape, loss_grad=1.0):
    """Gradients of the (scalar) tape output w.r.t. every parameter leaf.

    Raises NumericError naming the offending node if any gradient goes
    non-finite.
    """
    root = tape.output
    if np.size(root.value) != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {root.shape}")

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.asarray(loss_grad, dtype=np.asarray(root.value).dtype)}
    for node in reversed(order):
        if node.vjp is None:
            continue
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        # Non-finite propagation is detected below and raised with the node
        # id; the interim fp warnings carry no extra information.
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            parent_grads = node.vjp(grad)
        for parent, pgrad in zip(node.parents, parent_grads):
            pgrad = np.asarray(pgrad)
            if not np.all(np.isfinite(pgrad)):
                raise NumericError(f"non-finite gradient at node {parent!r} "
                                   f"(consumer {node!r})")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pgrad
            else:
                grads[key] = pgrad

    out = {}
    for name, leaf in tape.params.items():
        grad = grads.get(id(leaf))
        if grad is None:
            grad = np.zeros_like(leaf.value)
        out[name] = np.asarray(grad).reshape(np.shape(leaf.value))
    return out


def finite_diff_report(program, params, *inputs, epsilon=1e-5,
                       samples_per_tensor=256, seed=0):
    """Per-parameter max relative error between backward() and central
    finite differences.

    Parameters must be float64.  Coordinates are sampled (at least
    ``samples_per_tensor`` per tensor, or all of them when the tensor is
    smaller).  Near-zero gradient pairs are compared absolutely so finite-
    difference roundoff on flat coordinates does not dominate.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for name, p in params.items():
        if np.asarray(p).dtype != np.float64:
            raise ShapeError(f"finite_diff_report requires float64 params ({name})")

    _, tape = record_forward(program, params, *inputs)
    analytic = backward(tape)

    def loss_at(mutated):
        return float(val(program(mutated, *inputs)))

    rng = np.random.Generator(np.random.PCG64(seed))
    report = {}
    work = {name: np.array(p, dtype=np.float64) for name, p in params.items()}
    for name in params:
        flat = work[name].reshape(-1)
        count = flat.size
        if count <= samples_per_tensor:
            coords = np.arange(count)
        else:
            coords = rng.choice(count, size=samples_per_tensor, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up = loss_at(work)
            flat[c] = orig - epsilon
            down = loss_at(work)
            flat[c] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[c])
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < 1e-6 else abs(a - numeric) / scale
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(program, params, *inputs, epsilon=1e-5,
                      samples_per_tensor=256, seed=0):
    """Max relative error across all parameters (see finite_diff_report)."""
    report = finite_diff_report(program, params, *inputs, epsilon=epsilon,
                                samples_per_tensor=samples_per_tensor, seed=seed)
    return max(report.values())
