"""A small reverse-mode automatic differentiation engine on float64 arrays.

Every operation on :class:`Tensor` objects that require gradients records a
node holding its inputs and a backward rule.  Nodes carry a creation
counter, so the recording order is a topological order and
:func:`backward` simply walks the recorded nodes in reverse.

Feature maps use channels-last layout ``(B, H, W, C)``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_counter = itertools.count()

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_counter)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _node(a.data / b.data, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * a.data / b.data**2, b.shape)))


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, a.shape),))


def exp(a) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """tanh approximation."""
    x = a.data
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(y, (a,), back)


def softmax(a) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), back)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * a.ndim)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def window_partition(x, P: int) -> Tensor:
    """(B, H, W, C) -> (B * H/P * W/P, P*P, C): non-overlapping P x P windows."""
    B, H, W, C = x.shape
    if H % P or W % P:
        raise ShapeError(f"window_partition: spatial shape {(H, W)} not divisible by {P}")
    t = reshape(x, (B, H // P, P, W // P, P, C))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B * (H // P) * (W // P), P * P, C))


def window_merge(x, P: int, B: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    t = reshape(x, (B, H // P, W // P, P, P, C))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B, H, W, C))


def grid_partition(x, P: int) -> Tensor:
    """(B, H, W, C) -> (B * P*P, H/P * W/P, C).

    Group ``(i, j)`` collects the token at offset ``(i, j)`` inside every
    P x P window, i.e. a dilated grid spanning the whole map.
    """
    B, H, W, C = x.shape
    if H % P or W % P:
        raise ShapeError(f"grid_partition: spatial shape {(H, W)} not divisible by {P}")
    t = reshape(x, (B, H // P, P, W // P, P, C))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (B * P * P, (H // P) * (W // P), C))


def grid_merge(x, P: int, B: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    t = reshape(x, (B, P, P, H // P, W // P, C))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (B, H, W, C))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(y.reshape(lead + (w.shape[1],)), parents, back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(y, (x, gamma, beta), back)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout.  Identity (the same object) in eval mode or when p == 0."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- convolution / pooling

def _pad1(a):
    return np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))


def conv3x3(x, w, b=None, stride: int = 1) -> Tensor:
    """Dense 3x3 convolution, zero padding 1.  ``w`` is (3, 3, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    B, H, W, Cin = x.shape
    if w.shape[:3] != (3, 3, Cin):
        raise ShapeError(f"conv3x3: weight {w.shape} does not match input {x.shape}")
    Cout = w.shape[3]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = _pad1(x.data)
    cols = np.concatenate(
        [xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
         for i in range(3) for j in range(3)], axis=-1)
    wm = w.data.reshape(9 * Cin, Cout)
    y = cols @ wm
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, Cout)
        gw = (cols.reshape(-1, 9 * Cin).T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(B, Ho, Wo, 9, Cin)
        gxp = np.zeros_like(xp)
        for t in range(9):
            i, j = divmod(t, 3)
            gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[..., t, :]
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(y, parents, back)


def depthwise_conv3x3(x, w, b=None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1.  ``w`` is (3, 3, C)."""
    x, w = as_tensor(x), as_tensor(w)
    B, H, W, C = x.shape
    if w.shape != (3, 3, C):
        raise ShapeError(f"depthwise_conv3x3: weight {w.shape} does not match input {x.shape}")
    xp = _pad1(x.data)
    y = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            y += xp[:, i:i + H, j:j + W, :] * w.data[i, j]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, w, b)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + H, j:j + W, :] += g * w.data[i, j]
                gw[i, j] = (g * xp[:, i:i + H, j:j + W, :]).sum(axis=(0, 1, 2))
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _node(y, parents, back)


def pointwise_conv(x, w, b=None) -> Tensor:
    """1x1 convolution in channels-last layout is a linear map on the channel axis."""
    return linear(x, w, b)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial shape {(H, W)} is odd")
    y = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (0.25 * g,)

    return _node(y, (x,), back)


def max_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2: spatial shape {(H, W)} is odd")
    blocks = x.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(B, H // 2, W // 2, C, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(B, H, W, C),)

    return _node(y, (x,), back)


# ---------------------------------------------------------------- backward pass

def tape(output: Tensor) -> list[Tensor]:
    """All graph nodes reachable from ``output``, in recording order."""
    seen, stack, nodes = set(), [output], []
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Gradients accumulate across calls until the leaves are zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def gradient_check(f, params, step: float = 1e-5, atol: float = 1e-12) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``; it must be deterministic.  The error for each parameter
    tensor is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, atol)`` in the 2-norm.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), atol)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
