"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer.
Primitives build the computation graph implicitly: each output tensor
remembers its inputs and a vector-Jacobian closure, and :func:`backward`
walks the graph in reverse topological order. Non-leaf gradients live only
for the duration of a backward pass; leaves accumulate into ``.grad``.

Everything is float64. The primitive set is exactly what the models and
adapters in this package need; :func:`apply_primitive` exposes it behind a
string registry.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .kernels import col2im, conv_out_size, im2col


class ShapeMismatch(ValueError):
    """Raised when a primitive's input shapes are incompatible."""


class UnknownPrimitive(ValueError):
    """Raised when apply_primitive is given an unregistered kind."""


_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / sampling loops)."""
    prev = _grad_on()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 value array, an optional grad buffer, and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # participates in some gradient path (is, or can reach, a grad leaf)
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), Tensor(-1.0)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, op: str, parents, vjp):
    """Attach graph links to `out` if grad mode is on and any parent is tracked."""
    if _grad_on() and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
        out.requires_grad = True
    return out


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        out, "add", (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        out, "mul", (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul: needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(
            f"matmul: inner dims differ, {a.shape}[-1] != {b.shape}[-2]"
        )
    out = Tensor(np.matmul(a.data, b.data))
    a_tracked, b_tracked = a._tracked(), b._tracked()

    def vjp(g):
        ga = gb = None
        if a_tracked:
            ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b_tracked:
            gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, "matmul", (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """NCHW convolution, no built-in bias (add one with `add`)."""
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 4-D x and w, got {x.shape}, {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    ho, wo = conv_out_size(h, wd, kh, kw, sh, sw, ph, pw)
    cols = im2col(x.data, kh, kw, sh, sw, ph, pw)  # (B, Cin*kh*kw, L)
    w2d = w.data.reshape(cout, -1)
    out = Tensor(np.matmul(w2d, cols).reshape(b, cout, ho, wo))
    x_tracked, w_tracked = x._tracked(), w._tracked()

    def vjp(g):
        g2d = g.reshape(b, cout, ho * wo)
        gx = gw = None
        if w_tracked:
            gw = np.einsum("bol,bkl->ok", g2d, cols).reshape(w.shape)
        if x_tracked:
            gcols = np.matmul(w2d.T, g2d)
            gx = col2im(gcols, cin, h, wd, kh, kw, sh, sw, ph, pw)
        return gx, gw

    return _record(out, "conv2d", (x, w), vjp)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    return _record(out, "relu", (x,), lambda g: (g * (x.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return _record(out, "gelu", (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(out, "softmax", (x,), vjp)


def _norm_core(x, gamma, beta, axes, eps, mu, var, op):
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    m = np.prod([x.shape[a] for a in axes])

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.sum(axis=axes, keepdims=True) / m
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
        )
        return (
            dx,
            _reduce_to(g * xhat, gamma.shape),
            _reduce_to(g, beta.shape),
        )

    return _record(out, op, (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes=(-1,), eps=1e-5) -> Tensor:
    """Normalize over `axes`; gamma/beta must broadcast against x."""
    axes = tuple(a % x.data.ndim for a in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _norm_core(x, gamma, beta, axes, eps, mu, var, "layer-norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm for (B,C) or (B,C,H,W) inputs.

    Training mode normalizes with batch statistics and folds them into the
    running buffers in place (running = momentum*running + (1-m)*batch);
    eval mode is a fixed affine map using the running buffers.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeMismatch(f"batch-norm: expected 2-D or 4-D input, got {x.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    c = x.shape[1]
    gshape = (c,) if x.data.ndim == 2 else (c, 1, 1)
    gam = Tensor(gamma.data.reshape(gshape))
    gam.requires_grad = gamma.requires_grad
    bet = Tensor(beta.data.reshape(gshape))
    bet.requires_grad = beta.requires_grad
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(c)
        out = _norm_core(x, gam, bet, axes, eps, mu, var, "batch-norm")
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(gshape) + eps)
        xhat = (x.data - running_mean.reshape(gshape)) * inv
        out = Tensor(xhat * gam.data + bet.data)

        def vjp(g):
            return (
                g * gam.data * inv,
                _reduce_to(g * xhat, gam.shape),
                _reduce_to(g, bet.shape),
            )

        out = _record(out, "batch-norm", (x, gam, bet), vjp)
    return _rewire_bn(out, gamma, beta)


def _rewire_bn(out: Tensor, gamma: Tensor, beta: Tensor):
    """Reroute grads from the reshaped gamma/beta views to the real leaves."""
    inner_vjp = out._vjp
    if inner_vjp is not None:
        x_parent = out._parents[0]

        def vjp(g):
            gx, ggam, gbet = inner_vjp(g)
            ggam = None if ggam is None else ggam.reshape(gamma.shape)
            gbet = None if gbet is None else gbet.reshape(beta.shape)
            return gx, ggam, gbet

        out._parents = (x_parent, gamma, beta)
        out._vjp = vjp
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    axes = tuple(range(x.data.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis)
    )
    axes = tuple(a % x.data.ndim for a in axes)
    n = np.prod([x.shape[a] for a in axes])

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record(out, "mean", (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    axes = tuple(range(x.data.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis)
    )
    axes = tuple(a % x.data.ndim for a in axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, "sum", (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    out = Tensor(x.data.transpose(axes))
    inv = np.argsort(axes)
    return _record(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def slice_(x: Tensor, key) -> Tensor:
    out = Tensor(x.data[key])

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[key] = g
        return (gx,)

    return _record(out, "slice", (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(out, "concat", tuple(tensors), vjp)


def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1) -> Tensor:
    """y = gamma * x + beta with per-channel gamma/beta along `axis`."""
    axis = axis % x.data.ndim
    c = x.shape[axis]
    if gamma.size != c or beta.size != c:
        raise ShapeMismatch(
            f"scale-shift: axis {axis} has width {c}, got gamma {gamma.shape}, "
            f"beta {beta.shape}"
        )
    bshape = [1] * x.data.ndim
    bshape[axis] = c
    gb = gamma.data.reshape(bshape)
    out = Tensor(x.data * gb + beta.data.reshape(bshape))
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def vjp(g):
        return (
            g * gb,
            (g * x.data).sum(axis=reduce_axes).reshape(gamma.shape),
            g.sum(axis=reduce_axes).reshape(beta.shape),
        )

    return _record(out, "scale-shift", (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy from raw logits; targets are integer class ids."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross-entropy: logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if targets.shape != (b,):
        raise ShapeMismatch(
            f"cross-entropy: targets shape {targets.shape} != batch ({b},)"
        )
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(
            f"cross-entropy: target class out of range [0, {c}): "
            f"{int(targets.min())}..{int(targets.max())}"
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(b), targets]
    out = Tensor(losses.mean())

    def vjp(g):
        p = np.exp(z - lse)
        p[np.arange(b), targets] -= 1.0
        return (p * (float(g) / b),)

    return _record(out, "cross-entropy", (logits,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    out = Tensor((diff * diff).mean())
    n = pred.size

    def vjp(g):
        d = (2.0 * float(g) / n) * diff
        return (d, -d)

    return _record(out, "mse", (pred, target), vjp)


_REGISTRY = {
    "add": lambda ins, at: add(*ins),
    "mul": lambda ins, at: mul(*ins),
    "matmul": lambda ins, at: matmul(*ins),
    "conv2d": lambda ins, at: conv2d(
        *ins, stride=at.get("stride", 1), padding=at.get("padding", 0)
    ),
    "relu": lambda ins, at: relu(*ins),
    "gelu": lambda ins, at: gelu(*ins),
    "softmax": lambda ins, at: softmax(*ins, axis=at.get("axis", -1)),
    "layer-norm": lambda ins, at: layer_norm(
        *ins, axes=at.get("axes", (-1,)), eps=at.get("eps", 1e-5)
    ),
    "batch-norm": lambda ins, at: batch_norm(
        ins[0], ins[1], ins[2],
        at["running_mean"], at["running_var"],
        at.get("training", False), at.get("momentum", 0.9), at.get("eps", 1e-5),
    ),
    "mean": lambda ins, at: mean(
        *ins, axis=at.get("axis"), keepdims=at.get("keepdims", False)
    ),
    "sum": lambda ins, at: tsum(
        *ins, axis=at.get("axis"), keepdims=at.get("keepdims", False)
    ),
    "reshape": lambda ins, at: reshape(*ins, shape=at["shape"]),
    "transpose": lambda ins, at: transpose(*ins, axes=at["axes"]),
    "slice": lambda ins, at: slice_(*ins, key=at["key"]),
    "concat": lambda ins, at: concat(ins, axis=at.get("axis", 0)),
    "scale-shift": lambda ins, at: scale_shift(*ins, axis=at.get("axis", -1)),
    "cross-entropy": lambda ins, at: cross_entropy(ins[0], at["targets"]),
    "mse": lambda ins, at: mse(ins[0], ins[1]),
}


def apply_primitive(kind: str, inputs, attrs=None) -> Tensor:
    """Dispatch a primitive by name; inputs are Tensors or array-likes."""
    if kind not in _REGISTRY:
        raise UnknownPrimitive(f"unknown primitive: {kind!r}")
    inputs = [_as_tensor(t) for t in inputs]
    return _REGISTRY[kind](inputs, attrs or {})


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.reshape(node.data.shape)
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p._tracked():
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params):
    """Clear gradients on a list of ParamRecords or Tensors; values untouched."""
    for p in params:
        t = getattr(p, "tensor", p)
        t.grad = None


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic grad of f at x and central differences.

    `f` must be a deterministic map Tensor -> scalar Tensor. The error for
    each entry is |analytic - numeric| / (|analytic| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(probe).item()
            flat[i] = orig - eps
            fm = f(probe).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)))
