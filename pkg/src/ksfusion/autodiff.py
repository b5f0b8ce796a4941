"""Minimal dense-tensor engine with reverse-mode differentiation.

Every value is a float64 numpy array. A graph is recorded eagerly while the
forward pass runs; :func:`backward` walks it once in reverse topological
order and returns gradients for the leaf tensors. Nothing is stored on the
tensors themselves, so a graph is simply dropped after use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946

# pixel-space distance below which a sample coordinate is treated as a knot
_KNOT_SNAP = 1e-9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class Tensor:
    """Immutable float64 array that may take part in a differentiation graph.

    Leaf tensors created with ``requires_grad=True`` are the variables that
    :func:`backward` reports gradients for. Tensors produced by ops record
    their parents only when at least one parent requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"empty dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from every reachable leaf with ``requires_grad`` to its
    gradient. Gradients of a node are summed over all of its uses.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt``; unreachable ones get zeros."""
    found = backward(loss)
    return [found.get(t, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    try:
        if flat:
            # fold leading axes into rows: one GEMM instead of a batched loop
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def _back(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), _back, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, _back, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def _back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (x,), _back, "getitem")


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows :func:`numpy.pad`."""
    pad_width = tuple(tuple(int(v) for v in p) for p in pad_width)
    window = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _result(np.pad(x.data, pad_width), (x,), lambda g: (g[window],), "pad")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), _back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    expx = np.exp(np.minimum(x.data, 0.0))
    out = SELU_SCALE * np.where(pos, x.data, SELU_ALPHA * (expx - 1.0))
    deriv = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * expx)
    return _result(out, (x,), lambda g: (g * deriv,), "selu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _result(out, (x,), lambda g: (g * _sigmoid(-v),), "log_sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), _back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# norms and similarity


def frobenius_norm(x: Tensor) -> Tensor:
    n = math.sqrt(float(np.sum(x.data * x.data)))
    # subgradient 0 at the origin
    return _result(np.array(n), (x,), lambda g: (g * x.data / n if n > 0 else np.zeros_like(x.data),), "frobenius_norm")


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm."""
    if x.ndim != 2:
        raise DimensionError(f"normalize_rows expects a matrix, got {x.shape}")
    with np.errstate(over="ignore"):
        norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    if not np.all(np.isfinite(norms)):
        raise NonFiniteError("normalize_rows: row norm overflowed")
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise ContractError(f"cannot normalize zero-norm row {int(zero[0])}")
    out = x.data / norms

    def _back(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return _result(out, (x,), _back, "normalize_rows")


def gram_matrix(x: Tensor) -> Tensor:
    """Cosine-similarity Gram matrix of the rows of ``x`` (B x D -> B x B).

    The diagonal is pinned to exactly 1 (it is constant, so carries no gradient).
    """
    xn = normalize_rows(as_tensor(x))
    eye = np.eye(xn.shape[0])
    return add(mul(matmul(xn, transpose(xn)), 1.0 - eye), eye)


def cosine_similarity(a, b) -> float:
    """Plain cosine of two flat vectors; not part of any graph."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# layers expressed as ops


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding, channels-last.

    ``x`` is B x H x W x C_in and ``weight`` is 3 x 3 x C_in x C_out.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_3x3 got input {x.shape} and kernel {weight.shape}")
    if weight.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d_3x3 channel mismatch: {x.shape[3]} vs {weight.shape[2]}")
    _, h, w, c_in = x.shape
    padded = pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = concat(
        [padded[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)],
        axis=-1,
    )
    return linear(cols, reshape(weight, (9 * c_in, weight.shape[3])), bias)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(feat: Tensor, points: Tensor) -> Tensor:
    """Sample a channels-last feature map at normalized coordinates.

    ``feat`` is H x W x C (or B x H x W x C) and ``points`` is P x 2 (or
    B x P x 2) with ``points[..., 0]`` the horizontal and ``points[..., 1]``
    the vertical coordinate in [-1, 1]. Pixel centres sit at
    ``(2i + 1) / size - 1``; coordinates beyond the outermost centres are
    clamped to the border. Differentiable in both arguments.
    """
    feat, points = as_tensor(feat), as_tensor(points)
    batched = feat.ndim == 4
    if feat.ndim not in (3, 4) or points.ndim != feat.ndim - 1 or points.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample got feat {feat.shape} and points {points.shape}")
    if batched and feat.shape[0] != points.shape[0]:
        raise DimensionError(f"bilinear_sample batch mismatch: {feat.shape[0]} vs {points.shape[0]}")

    f = feat.data if batched else feat.data[None]
    pts = points.data if batched else points.data[None]
    b, h, w, _ = f.shape

    def _pixel(coord, size):
        raw = (coord + 1.0) * (size / 2.0) - 0.5
        pix = np.clip(raw, 0.0, size - 1.0)
        near = np.rint(pix)
        pix = np.where(np.abs(pix - near) < _KNOT_SNAP, near, pix)
        lo = np.minimum(np.floor(pix).astype(np.int64), size - 1)
        hi = np.minimum(lo + 1, size - 1)
        active = (raw > 0.0) & (raw < size - 1.0)
        return lo, hi, pix - lo, active

    x0, x1, wx, ax = _pixel(pts[..., 0], w)
    y0, y1, wy, ay = _pixel(pts[..., 1], h)
    bi = np.arange(b)[:, None]
    f00, f01 = f[bi, y0, x0], f[bi, y0, x1]
    f10, f11 = f[bi, y1, x0], f[bi, y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    out = (1 - wx_) * (1 - wy_) * f00 + wx_ * (1 - wy_) * f01 + (1 - wx_) * wy_ * f10 + wx_ * wy_ * f11

    def _back(g):
        g = g if batched else g[None]
        gf = np.zeros_like(f)
        np.add.at(gf, (bi, y0, x0), (1 - wx_) * (1 - wy_) * g)
        np.add.at(gf, (bi, y0, x1), wx_ * (1 - wy_) * g)
        np.add.at(gf, (bi, y1, x0), (1 - wx_) * wy_ * g)
        np.add.at(gf, (bi, y1, x1), wx_ * wy_ * g)
        dx = np.sum(g * ((1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)), axis=-1) * ax * (w / 2.0)
        dy = np.sum(g * ((1 - wx_) * (f10 - f00) + wx_ * (f11 - f01)), axis=-1) * ay * (h / 2.0)
        gp = np.stack([dx, dy], axis=-1)
        if not batched:
            gf, gp = gf[0], gp[0]
        return gf, gp

    return _result(out if batched else out[0], (feat, points), _back, "bilinear_sample")


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` with respect to every input entry."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Norm-wise relative error.

    The denominator is floored so a vanishing true gradient is judged by
    absolute error instead of by the ratio of two round-off residues.
    """
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-6) -> float:
    """Relative error between reverse-mode and central-difference gradients.

    ``fn`` maps tensors (one per array) to a scalar tensor.
    """
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad(fn(*inputs), inputs)
    numeric = numerical_gradient(fn, arrays, h)
    return relative_error(analytic, numeric)
