"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a backward closure on
the result tensor, so the DAG exists implicitly through parent links.  A
``Graph`` owns the trainable leaves and sweeps the DAG in reverse topological
order from a scalar output.  Everything is float64.
"""

from __future__ import annotations

import numpy as np

DEBUG_CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class Tensor:
    """A node of the computation DAG: float64 data, gradient slot, parents."""

    __slots__ = ("data", "grad", "parents", "_backward", "name")

    def __init__(self, data, parents=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        if DEBUG_CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}")
        self.grad = None
        self.parents = parents
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward, name=None) -> Tensor:
    out = Tensor(data, parents=parents, name=name)
    out._backward = backward
    return out


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)

    def backward():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None)

    def backward():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad -= _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), None)

    def backward():
        a.grad += _unbroadcast(out.grad / b.data, a.data.shape)
        b.grad -= _unbroadcast(out.grad * a.data / (b.data * b.data), b.data.shape)

    out._backward = backward
    return out


def powc(a, exponent: float) -> Tensor:
    """a ** c for a constant real exponent."""
    a = as_tensor(a)
    c = float(exponent)
    out = _make(a.data**c, (a,), None)

    def backward():
        a.grad += out.grad * c * a.data ** (c - 1.0)

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)

    def backward():
        a.grad += out.grad * out.data

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.log(a.data), (a,), None)

    def backward():
        a.grad += out.grad / a.data

    out._backward = backward
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)

    def backward():
        a.grad += out.grad * 0.5 / out.data

    out._backward = backward
    return out


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0 (sign convention of np.sign)."""
    a = as_tensor(a)
    out = _make(np.abs(a.data), (a,), None)

    def backward():
        a.grad += out.grad * np.sign(a.data)

    out._backward = backward
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), (a,), None)

    def backward():
        a.grad += out.grad * (1.0 - out.data * out.data)

    out._backward = backward
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(1.0 / (1.0 + np.exp(-a.data)), (a,), None)

    def backward():
        a.grad += out.grad * out.data * (1.0 - out.data)

    out._backward = backward
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = _make(np.clip(a.data, lo, hi), (a,), None)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward():
        a.grad += out.grad * inside

    out._backward = backward
    return out


# -- reductions and shape bookkeeping ---------------------------------------


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.sum(), (a,), None)

    def backward():
        a.grad += np.full(a.data.shape, float(out.grad))

    out._backward = backward
    return out


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = _make(a.data.mean(), (a,), None)

    def backward():
        a.grad += np.full(a.data.shape, float(out.grad) / n)

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None)

    def backward():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = backward
    return out


def flatten(a) -> Tensor:
    """Row-major flatten to a 1-D tensor."""
    return reshape(a, (-1,))


def concat(parts) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError("concat expects 1-D tensors")
    out = _make(np.concatenate([p.data for p in parts]), tuple(parts), None)
    offsets = np.cumsum([0] + [p.data.size for p in parts])

    def backward():
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[start:stop]

    out._backward = backward
    return out


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing; integer keys yield 0-d scalars."""
    a = as_tensor(a)
    out = _make(a.data[key], (a,), None)

    def backward():
        a.grad[key] += out.grad

    out._backward = backward
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product: (m,k)@(k,n) -> (m,n) or (m,k)@(k,) -> (m,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D lhs, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    if b.data.ndim == 1:

        def backward():
            a.grad += np.outer(out.grad, b.data)
            b.grad += a.data.T @ out.grad

    else:

        def backward():
            a.grad += out.grad @ b.data.T
            b.grad += a.data.T @ out.grad

    out._backward = backward
    return out


# -- neural-network primitives ----------------------------------------------


def conv2d_same(x, kernels, bias) -> Tensor:
    """'Same' cross-correlation of a C_in x H x W input with odd square kernels.

    kernels: (C_out, C_in, k, k); bias: (C_out,).  Zero padding of (k-1)/2 on
    every border keeps the spatial dimensions.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError("conv2d_same expects input (C,H,W) and kernels (F,C,k,k)")
    c_out, c_in, k, k2 = kernels.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.data.shape[0] != c_in:
        raise ShapeError(f"input channels {x.data.shape[0]} != kernel channels {c_in}")
    _, h, w = x.data.shape
    pad = (k - 1) // 2

    padded = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    padded[:, pad : pad + h, pad : pad + w] = x.data
    # im2col: one row per (channel, kernel offset), one column per output pixel
    cols = np.empty((c_in * k * k, h * w))
    row = 0
    for c in range(c_in):
        for di in range(k):
            for dj in range(k):
                cols[row] = padded[c, di : di + h, dj : dj + w].ravel()
                row += 1
    kmat = kernels.data.reshape(c_out, c_in * k * k)
    out_data = (kmat @ cols).reshape(c_out, h, w) + bias.data[:, None, None]
    out = _make(out_data, (x, kernels, bias), None)

    def backward():
        g = out.grad.reshape(c_out, h * w)
        bias.grad += out.grad.sum(axis=(1, 2))
        kernels.grad += (g @ cols.T).reshape(kernels.data.shape)
        dcols = kmat.T @ g
        dpadded = np.zeros_like(padded)
        row = 0
        for c in range(c_in):
            for di in range(k):
                for dj in range(k):
                    dpadded[c, di : di + h, dj : dj + w] += dcols[row].reshape(h, w)
                    row += 1
        x.grad += dpadded[:, pad : pad + h, pad : pad + w]

    out._backward = backward
    return out


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 on a (C,H,W) tensor.

    Odd trailing rows/columns are handled by edge-truncated windows.  The
    gradient is routed to the argmax only; ties go to the first element of
    the window in row-major order.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("maxpool2d expects a (C,H,W) tensor")
    c, h, w = x.data.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    # pad to even with -inf so truncated windows never select padding
    padded = np.full((c, 2 * ho, 2 * wo), -np.inf)
    padded[:, :h, :w] = x.data
    windows = padded.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = windows.argmax(axis=3)  # first max in row-major window order
    out = _make(windows.max(axis=3), (x,), None)

    ci, ii, jj = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    src_i = 2 * ii + arg // 2
    src_j = 2 * jj + arg % 2

    def backward():
        dpadded = np.zeros((c, 2 * ho, 2 * wo))
        np.add.at(dpadded, (ci, src_i, src_j), out.grad)
        x.grad += dpadded[:, :h, :w]

    out._backward = backward
    return out


def softmax(logits) -> Tensor:
    """Stable softmax of a 1-D tensor (max subtraction); sums to 1."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError("softmax expects a 1-D tensor")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    s = e / e.sum()
    out = _make(s, (logits,), None)

    def backward():
        g = out.grad
        logits.grad += s * (g - np.dot(g, s))

    out._backward = backward
    return out


def logsumexp(a) -> Tensor:
    """log(sum(exp(a))) of a 1-D tensor, max-shifted for stability."""
    a = as_tensor(a)
    m = float(np.max(a.data))  # detached shift; exact gradient regardless
    return log(tsum(exp(a - m))) + m


def dropout(x, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: in training, zero with probability `rate` and scale
    survivors by 1/(1-rate); in inference, identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * keep, (x,), None)

    def backward():
        x.grad += out.grad * keep

    out._backward = backward
    return out


def rational(x, coeffs_p, coeffs_q) -> Tensor:
    """Pole-free rational activation of degrees (3, 2), applied elementwise:

        R(x) = (p0 + p1 x + p2 x^2 + p3 x^3) / (1 + |q1 x + q2 x^2|)

    The denominator is >= 1 everywhere, so R has no poles.  coeffs_p (4,) and
    coeffs_q (2,) are trainable and shared across all elements of x.
    """
    x, p, q = as_tensor(x), as_tensor(coeffs_p), as_tensor(coeffs_q)
    if p.data.shape != (4,) or q.data.shape != (2,):
        raise ShapeError("rational expects coeffs_p of shape (4,) and coeffs_q of shape (2,)")
    xd = x.data
    x2 = xd * xd
    x3 = x2 * xd
    num = p.data[0] + p.data[1] * xd + p.data[2] * x2 + p.data[3] * x3
    u = q.data[0] * xd + q.data[1] * x2
    den = 1.0 + np.abs(u)
    out = _make(num / den, (x, p, q), None)

    def backward():
        g = out.grad
        sgn = np.sign(u)
        dnum_dx = p.data[1] + 2.0 * p.data[2] * xd + 3.0 * p.data[3] * x2
        dden_dx = sgn * (q.data[0] + 2.0 * q.data[1] * xd)
        x.grad += g * (dnum_dx * den - num * dden_dx) / (den * den)
        gd = g / den
        p.grad += np.array([gd.sum(), (gd * xd).sum(), (gd * x2).sum(), (gd * x3).sum()])
        gq = g * num * sgn / (den * den)
        q.grad -= np.array([(gq * xd).sum(), (gq * x2).sum()])

    out._backward = backward
    return out


# -- graph ---------------------------------------------------------------------


class Graph:
    """Parameter registry plus reverse-mode sweep over the implicit DAG.

    ``nodes`` holds the topological order discovered by the last ``backward``
    call (every node's parents precede it).  Rebuild a fresh Graph per
    forward pass; two backward calls on the same output are identical because
    gradients are zeroed before each sweep.
    """

    def __init__(self):
        self.parameters: list[Tensor] = []
        self.nodes: list[Tensor] = []

    def register(self, tensor: Tensor) -> Tensor:
        self.parameters.append(tensor)
        return tensor

    def backward(self, output: Tensor) -> None:
        if output.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
        self.nodes = _toposort(output)
        for node in self.nodes:
            node.grad = np.zeros_like(node.data)
        for p in self.parameters:
            p.grad = np.zeros_like(p.data)
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()


def _toposort(output: Tensor) -> list:
    """Iterative DFS post-order: parents before children."""
    order = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(output: Tensor, parameters=()) -> None:
    """One-shot reverse sweep without keeping a Graph around."""
    g = Graph()
    for p in parameters:
        g.register(p)
    g.backward(output)
