"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the video classifier and the distillation losses need are
implemented. Tensors are float32 by default; ``precision(np.float64)`` switches
newly created tensors to float64, which is what the gradient checks run under.

Every differentiable op also accepts a leading batch axis, so a classifier can
run a whole minibatch through one graph.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dlkd.errors import ParameterError, ShapeError, UsageError

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


@contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block."""
    previous = _default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    """Disable graph recording (evaluation mode)."""
    previous = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._op = "leaf"
        self._backward = None

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
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, params=()):
        backward(self, params=params)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data, parents, op, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor


@dataclass
class ComputeGraph:
    """Topologically ordered nodes reachable from ``root`` through differentiable ops."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root):
        order = []
        index = {}
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            key = id(tensor)
            if key in index:
                continue
            if expanded:
                index[key] = len(order)
                order.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor._parents):
                if parent.requires_grad and id(parent) not in index:
                    stack.append((parent, False))
        nodes = [
            Node(t._op, tuple(index[id(p)] for p in t._parents if p.requires_grad), t)
            for t in order
        ]
        return cls(nodes)


def backward(loss, graph=None, params=()):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph.

    Leaf gradients accumulate across calls, so zero them between optimizer
    steps. Tensors in ``params`` that the loss does not reach get a zero grad.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        tensor = node.output
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        grad = grad.astype(tensor.dtype, copy=False)
        if tensor._backward is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        tensor.grad = grad
        for parent, parent_grad in zip(tensor._parents, tensor._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return graph


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    shape_a, shape_b = a.shape, b.shape
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {shape_a} and {shape_b}") from None

    def grad_fn(g):
        return _unbroadcast(g, shape_a), _unbroadcast(g, shape_b)

    return _result(data, (a, b), "add", grad_fn)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), "mul", grad_fn)


def neg(a):
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def tsum(a, axis=None):
    data = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), "sum", grad_fn)


def tmean(a, axis=None):
    data = np.asarray(a.data.mean(axis=axis))
    count = a.size // max(data.size, 1)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(data, (a,), "mean", grad_fn)


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def take(a, index):
    data = np.array(a.data[index])

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(data, (a,), "index", grad_fn)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum propagates NaN, so corrupt activations still surface as a non-finite loss
    return _result(np.maximum(x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def avg_pool_global(x):
    """Mean over the trailing (T, H, W) axes: [C,T,H,W] -> [C], [N,C,T,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.ndim not in (4, 5):
        raise ShapeError(f"avg_pool_global expects [C,T,H,W] or [N,C,T,H,W], got {x.shape}")
    axes = (-3, -2, -1)
    count = x.shape[-1] * x.shape[-2] * x.shape[-3]
    data = x.data.mean(axis=axes)

    def grad_fn(g):
        return (np.broadcast_to(g[..., None, None, None] / count, x.shape).copy(),)

    return _result(data, (x,), "avg_pool", grad_fn)


def affine(x, weight, bias):
    """``x @ weight.T + bias`` for x of shape [N_in] or [B, N_in]."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"affine shapes not conformable: x {x.shape}, W {weight.shape}, b {bias.shape}"
        )
    data = x.data @ weight.data.T + bias.data

    def grad_fn(g):
        gx = g @ weight.data
        if g.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _result(data, (x, weight, bias), "affine", grad_fn)


def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def _softmax_np(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits, temperature=1.0):
    _check_temperature(temperature)
    logits = as_tensor(logits)
    y = _softmax_np(logits.data / temperature)

    def grad_fn(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / temperature,)

    return _result(y, (logits,), "softmax", grad_fn)


def log_softmax(logits, temperature=1.0):
    _check_temperature(temperature)
    logits = as_tensor(logits)
    y = _log_softmax_np(logits.data / temperature)

    def grad_fn(g):
        return ((g - np.exp(y) * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _result(y, (logits,), "log_softmax", grad_fn)


# ---------------------------------------------------------------------------
# convolution


def _triple(value, name):
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ParameterError(f"{name} must have three components, got {value}")
    return value


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """3D cross-correlation of [C_in,T,H,W] (or [N,C_in,T,H,W]) with [C_out,C_in,kt,kh,kw]."""
    x = as_tensor(x)
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise ParameterError(f"stride components must be >= 1, got {stride}")
    if min(padding) < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if x.ndim not in (4, 5) or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects a 4D/5D input and 5D kernel, got {x.shape} and {kernel.shape}")
    batched = x.ndim == 5
    xd = x.data if batched else x.data[None]
    c_out, c_in, kt, kh, kw = kernel.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias shape {bias.shape} does not match kernel {kernel.shape}")
    padded_extent = [xd.shape[2 + i] + 2 * padding[i] for i in range(3)]
    if any(k > e for k, e in zip((kt, kh, kw), padded_extent)):
        raise ShapeError(f"kernel {kernel.shape} larger than padded input extents {padded_extent}")

    pt, ph, pw = padding
    st, sh, sw = stride
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    out_t, out_h, out_w = windows.shape[2:5]
    out = np.tensordot(windows, kernel.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    data = out if batched else out[0]

    def grad_fn(g):
        gb = g if batched else g[None]
        grad_kernel = np.tensordot(gb, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grad_bias = gb.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        grad_xp = np.zeros_like(xp)
        for a, b, c in product(range(kt), range(kh), range(kw)):
            contrib = np.tensordot(gb, kernel.data[:, :, a, b, c], axes=([1], [0]))
            grad_xp[
                :,
                :,
                a : a + st * (out_t - 1) + 1 : st,
                b : b + sh * (out_h - 1) + 1 : sh,
                c : c + sw * (out_w - 1) + 1 : sw,
            ] += contrib.transpose(0, 4, 1, 2, 3)
        grad_x = grad_xp[
            :, :, pt : pt + xd.shape[2], ph : ph + xd.shape[3], pw : pw + xd.shape[4]
        ]
        if not batched:
            grad_x = grad_x[0]
        return grad_x, grad_kernel, grad_bias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, "conv3d", grad_fn)


# ---------------------------------------------------------------------------
# finite differences + optimizer


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued ``f`` at ``x``, in float64."""
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(base)
    for i in range(base.size):
        probe = base.copy()
        probe.flat[i] += eps
        upper = f(Tensor(probe, dtype=np.float64))
        probe.flat[i] = base.flat[i] - eps
        lower = f(Tensor(probe, dtype=np.float64))
        grad.flat[i] = (_scalar(upper) - _scalar(lower)) / (2 * eps)
    return Tensor(grad, dtype=np.float64)


def _scalar(value):
    return float(value.item() if isinstance(value, Tensor) else value)


def relative_error(a, b):
    """max |a - b| scaled by the larger of the two max-magnitudes."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adamw_step(params, grads, state, lr):
    """One AdamW update, in place. Decay ``w -= lr*wd*w`` happens before the Adam step."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    if not len(params) == len(grads) == len(state.m) == len(state.v):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.shape == g.shape == m.shape == v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1**state.step
    correction2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        w = p.data
        if state.weight_decay:
            w -= lr * state.weight_decay * w
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        w -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


class AdamW:
    """Holds parameters and AdamW state; grads are zeroed explicitly each step."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.state = AdamWState.for_params(
            self.params, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr)
