"""A small reverse-mode autodiff kernel on top of numpy.

Tensors hold float64 arrays. Every op records a closure that maps the
output gradient to parent gradients; ``Tensor.backward`` walks the graph in
reverse topological order and accumulates (``+=``) into ``.grad`` so shared
subgraphs are handled. Ops never mutate their inputs.
"""
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import Diagnostic, FormatError, InvalidInput, InvalidShape, InvalidState

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidShape("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise Diagnostic("non-finite value produced in forward pass")
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (),
                  _backward=backward if requires else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a):
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def total(a):
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def linear(x, W, b):
    """``y = x @ W.T + b`` for ``x`` of shape (B, I), ``W`` (O, I), ``b`` (O,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise InvalidShape(f"linear: x{x.shape} W{W.shape} b{b.shape}")

    def backward(g):
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ W.data.T + b.data, (x, W, b), backward)


def pointwise_linear(x, W, b):
    """Kernel-size-1 convolution: the same linear map applied to every point.

    ``x`` is (B, I, M), ``W`` (O, I), ``b`` (O,); output (B, O, M).
    """
    if x.data.ndim != 3 or W.data.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise InvalidShape(f"pointwise_linear: x{x.shape} W{W.shape} b{b.shape}")

    def backward(g):
        gx = np.matmul(W.data.T, g)
        gW = np.einsum("bom,bim->oi", g, x.data)
        return gx, gW, g.sum(axis=(0, 2))

    return _make(np.matmul(W.data, x.data) + b.data[:, None], (x, W, b), backward)


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=LEAKY_SLOPE):
    # subgradient at 0 is the slope
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def batchnorm1d(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over the batch and point axes of (B, F, M) or (B, F) input.

    ``running_mean``/``running_var`` are updated in place in train mode.
    """
    nd = x.data.ndim
    if nd not in (2, 3):
        raise InvalidShape(f"batchnorm1d expects (B, F) or (B, F, M), got {x.shape}")
    axes = (0, 2) if nd == 3 else (0,)
    view = (1, -1, 1) if nd == 3 else (1, -1)
    n = x.data.size // x.shape[1]
    if train:
        if n <= 1:
            raise InvalidInput("batchnorm in train mode needs more than one element per feature")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(view)
        if train:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std.reshape(view) / n * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(view)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def maxpool_points(x):
    """Max over the point axis of (B, F, M); gradient routed to the (first) argmax."""
    if x.data.ndim != 3:
        raise InvalidShape(f"maxpool_points expects (B, F, M), got {x.shape}")
    idx = np.argmax(x.data, axis=2)
    out = np.take_along_axis(x.data, idx[..., None], axis=2)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx,)

    return _make(out, (x,), backward)


def concat(xs):
    """Concatenate (B, *) tensors along axis 1."""
    xs = [_wrap(x) for x in xs]
    if len({x.shape[0] for x in xs}) != 1:
        raise InvalidShape("concat: batch extents differ: " + ", ".join(str(x.shape) for x in xs))
    sizes = [x.shape[1] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([x.data for x in xs], axis=1), tuple(xs), backward)


def emd_loss(pred, targets, cap=geometry.EMD_CAP):
    """Mean exact EMD between each predicted (N, 3) cloud in ``pred`` (B, N, 3) and its target."""
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if pred.data.ndim != 3 or len(targets) != pred.shape[0]:
        raise InvalidShape(f"emd_loss: pred {pred.shape} vs {len(targets)} targets")
    costs = np.empty(len(targets))
    grads = np.empty_like(pred.data)
    for i, t in enumerate(targets):
        costs[i], m = geometry.emd(pred.data[i], t, cap=cap)
        grads[i] = geometry.emd_grad(pred.data[i], t, m)
    batch = len(targets)
    return _make(np.asarray(costs.mean()), (pred,), lambda g: (grads * (float(g) / batch),))


def hausdorff_loss(partials, pred):
    """Mean unidirectional Hausdorff distance from each partial cloud to its prediction."""
    if pred.data.ndim != 3 or len(partials) != pred.shape[0]:
        raise InvalidShape(f"hausdorff_loss: pred {pred.shape} vs {len(partials)} partials")
    vals = np.empty(len(partials))
    grads = np.empty_like(pred.data)
    for i, p in enumerate(partials):
        vals[i] = geometry.hausdorff_uni(p, pred.data[i])
        grads[i] = geometry.hausdorff_uni_grad(p, pred.data[i])
    batch = len(partials)
    return _make(np.asarray(vals.mean()), (pred,), lambda g: (grads * (float(g) / batch),))


def grad_check(f, x, step=1e-5):
    """Largest per-coordinate relative error between tape and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise InvalidShape("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(x.copy())).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise Diagnostic("grad_check: non-finite function value")
        numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidInput("Adam learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInput("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named trainable parameters, non-trainable buffers and Adam moments."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    adam: dict = field(default_factory=dict)

    def add(self, name, value):
        if name in self.params or name in self.buffers:
            raise InvalidInput(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise InvalidInput(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy_from(self, other):
        for name, t in other.params.items():
            self.params[name].data = t.data.copy()
        for name, b in other.buffers.items():
            self.buffers[name][...] = b

    def to_bytes(self, include_optimizer=True):
        return dumps_checkpoint(self, include_optimizer)

    def checksum(self):
        return hashlib.sha256(dumps_checkpoint(self, include_optimizer=False)).hexdigest()


def adam_step(store, cfg, names=None):
    """One bias-corrected Adam update of the named parameters, then zero their gradients."""
    names = list(store.params) if names is None else list(names)
    missing = [n for n in names if store.params[n].grad is None]
    if missing:
        raise InvalidState(f"no gradient for parameter(s): {', '.join(missing)}")
    for name in names:
        p = store.params[name]
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        g = p.grad
        st.step += 1
        st.m = cfg.beta1 * st.m + (1 - cfg.beta1) * g
        st.v = cfg.beta2 * st.v + (1 - cfg.beta2) * g * g
        m_hat = st.m / (1 - cfg.beta1 ** st.step)
        v_hat = st.v / (1 - cfg.beta2 ** st.step)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.grad = None


# Checkpoint format (little-endian):
#   magic b"MCPK", u32 version, u32 record count, then per record:
#   u8 kind (0 param, 1 buffer, 2 adam first moment, 3 adam second moment),
#   u16 name length, utf-8 name, u32 adam step count, u8 ndim, ndim x u32 dims,
#   prod(dims) float64 values in row-major order.
MAGIC = b"MCPK"
VERSION = 1


def _records(store, include_optimizer):
    for name in sorted(store.params):
        yield 0, name, 0, store.params[name].data
    for name in sorted(store.buffers):
        yield 1, name, 0, store.buffers[name]
    if include_optimizer:
        for name in sorted(store.adam):
            st = store.adam[name]
            yield 2, name, st.step, st.m
            yield 3, name, st.step, st.v


def dumps_checkpoint(store, include_optimizer=True):
    records = list(_records(store, include_optimizer))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for kind, name, step, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<BH", kind, len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<IB", step, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(data, store):
    """Load values from checkpoint bytes into an existing, identically shaped store."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    adam_m = {}
    for _ in range(count):
        kind, nlen = struct.unpack_from("<BH", view, pos)
        pos += 3
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        step, ndim = struct.unpack_from("<IB", view, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        if kind == 0:
            if name not in store.params or store.params[name].shape != arr.shape:
                raise FormatError(f"checkpoint parameter {name!r} does not fit the network")
            store.params[name].data = arr
        elif kind == 1:
            if name not in store.buffers or store.buffers[name].shape != arr.shape:
                raise FormatError(f"checkpoint buffer {name!r} does not fit the network")
            store.buffers[name][...] = arr
        elif kind == 2:
            adam_m[name] = (arr, step)
        elif kind == 3:
            m, step_m = adam_m.pop(name)
            store.adam[name] = AdamState(m, arr, step_m)
        else:
            raise FormatError(f"unknown record kind {kind}")
    return store
