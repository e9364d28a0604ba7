"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape is rebuilt on every forward pass: each kernel returns a new
``Tensor`` node holding its value, its input nodes, and a closure computing
the vector-Jacobian product. ``backward`` walks the tape once in reverse
topological order, summing adjoints for nodes used multiple times.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

# Log-space "zero" kept finite so every array stays finite after every op.
LOG_ZERO = -1.0e30

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """One tape node: a float64 array plus backprop links.

    ``stop_gradient`` marks a barrier node: its value passes through on the
    forward pass but backward writes no adjoint into its inputs.
    """

    __slots__ = ("data", "grad", "op", "inputs", "stop_gradient", "param", "_vjp")

    def __init__(self, data, op="leaf", inputs=(), vjp=None, param=False,
                 stop_gradient=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.inputs = tuple(inputs)
        self.param = param
        self.stop_gradient = stop_gradient
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Small amount of operator sugar; everything routes through the kernels.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """Leaf tensor registered as trainable (appears in gradient maps)."""
    return Tensor(data, op="param", param=True)


def constant(data) -> Tensor:
    """Leaf tensor excluded from gradient maps."""
    return Tensor(data, op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _shape_fail(op: str, *shapes) -> None:
    rendered = " vs ".join(str(tuple(s)) for s in shapes)
    raise ValueError(f"{op}: incompatible shapes {rendered}")


def _check_finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; a trailing 1-D operand broadcasts as a bias row."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data

        def vjp(g):
            return g, g
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = a.data + b.data
        lead = tuple(range(a.data.ndim - 1))

        def vjp(g):
            return g, g.sum(axis=lead)
    else:
        _shape_fail("add", a.shape, b.shape)
    return Tensor(out, op="add", inputs=(a, b), vjp=vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_fail("sub", a.shape, b.shape)
    return Tensor(a.data - b.data, op="sub", inputs=(a, b),
                  vjp=lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_fail("mul", a.shape, b.shape)
    return Tensor(a.data * b.data, op="mul", inputs=(a, b),
                  vjp=lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor(a.data * c, op="scale", inputs=(a,), vjp=lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        _shape_fail("matmul", a.shape, b.shape)
    return Tensor(a.data @ b.data, op="matmul", inputs=(a, b),
                  vjp=lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, b) -> Tensor:
    """Fused dense map: x @ w + b."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if (x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]
            or b.shape != (w.shape[1],)):
        _shape_fail("affine", x.shape, w.shape, b.shape)
    out = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor(out, op="affine", inputs=(x, w, b), vjp=vjp)


def _to_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _from_heads(x3: np.ndarray) -> np.ndarray:
    h, t, dh = x3.shape
    return x3.transpose(1, 0, 2).reshape(t, h * dh)


def multihead_scores(q, k, n_heads: int) -> Tensor:
    """Per-head scaled dot products: (heads, T_q, T_k) from 2-D q and k."""
    q, k = _as_tensor(q), _as_tensor(k)
    if (q.data.ndim != 2 or k.data.ndim != 2 or q.shape[1] != k.shape[1]
            or q.shape[1] % n_heads != 0):
        _shape_fail("multihead_scores", q.shape, k.shape)
    c = (q.shape[1] // n_heads) ** -0.5
    q3 = _to_heads(q.data, n_heads)
    k3 = _to_heads(k.data, n_heads)
    out = c * (q3 @ k3.transpose(0, 2, 1))

    def vjp(g):
        dq = _from_heads(c * (g @ k3))
        dk = _from_heads(c * (g.transpose(0, 2, 1) @ q3))
        return dq, dk

    return Tensor(out, op="multihead_scores", inputs=(q, k), vjp=vjp)


def multihead_mix(weights, v, n_heads: int) -> Tensor:
    """Per-head weighted value sums merged back to (T, width)."""
    weights, v = _as_tensor(weights), _as_tensor(v)
    if (weights.data.ndim != 3 or v.data.ndim != 2
            or weights.shape[0] != n_heads
            or weights.shape[2] != v.shape[0]
            or v.shape[1] % n_heads != 0):
        _shape_fail("multihead_mix", weights.shape, v.shape)
    v3 = _to_heads(v.data, n_heads)
    out = _from_heads(weights.data @ v3)

    def vjp(g):
        g3 = _to_heads(g, n_heads)
        dw = g3 @ v3.transpose(0, 2, 1)
        dv = _from_heads(weights.data.transpose(0, 2, 1) @ g3)
        return dw, dv

    return Tensor(out, op="multihead_mix", inputs=(weights, v), vjp=vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        _shape_fail("transpose", a.shape)
    return Tensor(a.data.T, op="transpose", inputs=(a,), vjp=lambda g: (g.T,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.log(a.data), op="log", inputs=(a,),
                  vjp=lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, op="exp", inputs=(a,), vjp=lambda g: (g * out,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, op="softmax", inputs=(a,), vjp=vjp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, op="log_softmax", inputs=(a,), vjp=vjp)


def logsumexp(a, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(
        np.exp(a.data - m).sum(axis=axis))

    def vjp(g):
        soft = np.exp(a.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * soft,)

    return Tensor(out, op="logsumexp", inputs=(a,), vjp=vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance; affine rescale."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        _shape_fail("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    out = gain.data * xhat + bias.data

    def vjp(g):
        gy = g * gain.data
        dx = (gy - gy.mean(axis=-1, keepdims=True)
              - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) / sigma
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor(out, op="layer_norm", inputs=(x, gain, bias), vjp=vjp)


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor(out, op="gelu", inputs=(x,), vjp=vjp)


def swish(x) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def vjp(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return Tensor(out, op="swish", inputs=(x,), vjp=vjp)


def depthwise_conv1d(x, w) -> Tensor:
    """Per-channel 1-D convolution over time with same-length output.

    ``x`` is (T, d), ``w`` is (K, d) with K odd; channel c of the output is
    the 1-D correlation of channel c of the input with column c of ``w``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        _shape_fail("depthwise_conv1d", x.shape, w.shape)
    k = w.shape[0]
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv1d: kernel size {k} must be odd")
    t, d = x.shape
    pad = (k - 1) // 2
    xp = np.zeros((t + k - 1, d))
    xp[pad:pad + t] = x.data
    out = np.zeros((t, d))
    for j in range(k):
        out += xp[j:j + t] * w.data[j]

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for j in range(k):
            dxp[j:j + t] += g * w.data[j]
            dw[j] = (g * xp[j:j + t]).sum(axis=0)
        return dxp[pad:pad + t], dw

    return Tensor(out, op="depthwise_conv1d", inputs=(x, w), vjp=vjp)


def embedding(table, ids) -> Tensor:
    """Row lookup: gathers ``table[ids]`` with summed scatter on backward."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(
            f"embedding: index out of vocabulary (valid 0..{n - 1}, "
            f"got {int(idx.min())}..{int(idx.max())})")
    out = table.data[idx]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return Tensor(out, op="embedding", inputs=(table,), vjp=vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: needs at least one input")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts)))

    return Tensor(out, op="concat", inputs=parts, vjp=vjp)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = _as_tensor(x)
    size = x.shape[axis]
    if start < 0 or length < 0 or start + length > size:
        raise ValueError(
            f"narrow: slice [{start}:{start + length}) out of range for "
            f"axis {axis} of shape {tuple(x.shape)}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return Tensor(x.data[sl], op="narrow", inputs=(x,), vjp=vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        _shape_fail("reshape", x.shape, shape)
    return Tensor(x.data.reshape(shape), op="reshape", inputs=(x,),
                  vjp=lambda g: (g.reshape(x.data.shape),))


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant; the mask may
    match the full shape or broadcast over leading axes."""
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape and m.shape != x.shape[x.data.ndim - m.ndim:]:
        _shape_fail("masked_fill", x.shape, m.shape)
    out = np.where(m, float(value), x.data)
    return Tensor(out, op="masked_fill", inputs=(x,),
                  vjp=lambda g: (np.where(m, 0.0, g),))


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return Tensor(out, op="reduce_sum", inputs=(x,), vjp=vjp)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n,
                                x.data.shape).copy(),)

    return Tensor(out, op="reduce_mean", inputs=(x,), vjp=vjp)


def stop_gradient(x) -> Tensor:
    """Forward identity; backward writes nothing into the wrapped subgraph."""
    x = _as_tensor(x)
    return Tensor(x.data, op="stop_gradient", inputs=(x,), stop_gradient=True)


KERNELS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "affine": affine,
    "multihead_scores": multihead_scores,
    "multihead_mix": multihead_mix,
    "transpose": transpose,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "swish": swish,
    "depthwise_conv1d": depthwise_conv1d,
    "embedding": embedding,
    "concat": concat,
    "narrow": narrow,
    "reshape": reshape,
    "masked_fill": masked_fill,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch a kernel by name; ``attrs`` become keyword arguments."""
    try:
        fn = KERNELS[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate adjoints from a scalar root; returns grads per parameter.

    Adjoints of nodes used several times accumulate by summation. Reachable
    parameters whose every path crosses a stop-gradient barrier map to zeros.
    """
    if root.data.shape != ():
        raise ValueError(
            f"backward: root must be scalar, got shape {tuple(root.shape)}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(())
    for node in reversed(order):
        if node.grad is None or node.stop_gradient or node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
    return {
        node: (node.grad if node.grad is not None
               else np.zeros_like(node.data))
        for node in order if node.param
    }


def grad_of(grads: dict[Tensor, np.ndarray], p: Tensor) -> np.ndarray:
    """Gradient for ``p`` from a backward map, zeros when untouched."""
    g = grads.get(p)
    return np.zeros_like(p.data) if g is None else g


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], theta: np.ndarray,
                      eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one parameter tensor to a scalar tensor. The relative error at
    each coordinate is |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"finite_diff_check: eps {eps} outside (0, 1e-3]")
    theta = np.asarray(theta, dtype=np.float64)
    p = parameter(theta)
    out = f(p)
    if not np.isfinite(out.data):
        raise FloatingPointError("finite_diff_check: f(theta) is not finite")
    analytic = grad_of(backward(out), p)

    flat = theta.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        up = f(Tensor(bumped.reshape(theta.shape))).item()
        bumped[i] -= 2 * eps
        down = f(Tensor(bumped.reshape(theta.shape))).item()
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(
                "finite_diff_check: non-finite perturbed evaluation")
        numeric[i] = (up - down) / (2 * eps)
    numeric = numeric.reshape(theta.shape)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
