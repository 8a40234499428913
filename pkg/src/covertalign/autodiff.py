"""Dense-array reverse-mode automatic differentiation on numpy.

Every differentiable quantity in the attack (images, perturbations, trigger
geometry, encoder activations) lives in a :class:`Tensor`. Operations record
their inputs and a backward closure on the produced tensor; calling
:func:`backward` on a scalar root replays the implicit tape in reverse
topological order and accumulates gradients on every ``requires_grad`` leaf.

Float32 is the production dtype; float64 is used by the gradient-check suite.
Results follow the dtype of their inputs, so a graph built from float64
tensors verifies against central finite differences at full precision.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "release_graph",
    "concat",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "clamp",
    "cast",
    "exp",
    "cos",
    "sin",
    "take_rows",
    "straight_through",
    "cosine_similarity",
    "affine_grid",
    "grid_sample_bilinear",
]


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    ``grad`` stays ``None`` until :func:`backward` reaches this tensor;
    repeated backward calls accumulate into the same buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut loose from the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        return _add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, 1.0 / float(other))
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result; the backward closure is kept only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray, borrowed: bool = False):
    # borrowed marks a gradient passed through from the output buffer; it must
    # be copied before we own it, as must any view (reshape/transpose/slice).
    if t.grad is None:
        if borrowed or g.base is not None or not g.flags.owndata or not g.flags.writeable:
            g = g.copy()
        t.grad = g
    else:
        t.grad += g


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic


def _add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.data.shape), borrowed=True)
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g, b.data.shape), borrowed=True)

    return _make(out_data, (a, b), bwd)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.data.shape), borrowed=True)
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def _scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def bwd(out):
        _accumulate(a, out.grad * c)

    return _make(out_data, (a,), bwd)


# ----------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects tensors")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul expects >=2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _reduce_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _reduce_to_shape(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def _transpose(a: Tensor, axes) -> Tensor:
    out_data = np.transpose(a.data, axes)

    def bwd(out):
        if axes is None:
            _accumulate(a, np.transpose(out.grad))
        else:
            _accumulate(a, np.transpose(out.grad, np.argsort(axes)))

    return _make(out_data, (a,), bwd)


def _reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(out):
        _accumulate(a, out.grad.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def _getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def bwd(out):
        buf = np.zeros_like(a.data)
        buf[key] += out.grad
        _accumulate(a, buf)

    return _make(out_data, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(out):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + n)
                _accumulate(p, out.grad[tuple(idx)])
            offset += n

    return _make(out_data, tuple(parts), bwd)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(out):
        g = out.grad / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd)


# ----------------------------------------------------------------------
# nonlinearities and normalizers

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(c(x + 0.044715x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(out):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accumulate(a, out.grad * local)

    return _make(out_data, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    x = a.data
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(out):
        g = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, _reduce_to_shape(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(beta, _reduce_to_shape(g, beta.data.shape))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, (gx - m1 - xhat * m2) * inv)

    return _make(out_data, (a, gamma, beta), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        g = out.grad
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(out):
        g = out.grad
        _accumulate(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bwd)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise ValueError("l2_normalize: zero-norm slice")
    out_data = x / norm

    def bwd(out):
        g = out.grad
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out_data * dot) / norm)

    return _make(out_data, (a,), bwd)


def clamp(a: Tensor, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 where the input lies inside the
    interval (bounds inclusive) and 0 outside. lo/hi are constants, scalar
    or arrays broadcastable to a."""
    lo_v = lo.data if isinstance(lo, Tensor) else lo
    hi_v = hi.data if isinstance(hi, Tensor) else hi
    out_data = np.clip(a.data, lo_v, hi_v)
    inside = (a.data >= lo_v) & (a.data <= hi_v)

    def bwd(out):
        _accumulate(a, out.grad * inside)

    return _make(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(out):
        _accumulate(a, out.grad * out_data)

    return _make(out_data, (a,), bwd)


def cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)

    def bwd(out):
        _accumulate(a, out.grad * -np.sin(a.data))

    return _make(out_data, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def bwd(out):
        _accumulate(a, out.grad * np.cos(a.data))

    return _make(out_data, (a,), bwd)


def cast(a: Tensor, dtype) -> Tensor:
    """Dtype conversion; the backward pass casts the gradient back.

    Returns the input unchanged when the dtype already matches, so same-dtype
    casts add no tape node.
    """
    dtype = np.dtype(dtype)
    if a.data.dtype == dtype:
        return a
    out_data = a.data.astype(dtype)

    def bwd(out):
        _accumulate(a, out.grad.astype(a.data.dtype))

    return _make(out_data, (a,), bwd)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup); indices is a constant int array."""
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def bwd(out):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, out.grad)
        _accumulate(table, buf)

    return _make(out_data, (table,), bwd)


def straight_through(value: np.ndarray, grad_path: Tensor) -> Tensor:
    """Forward the given values; route gradients to grad_path unchanged.

    Realizes hard-forward / soft-backward constructions: the returned tensor
    holds ``value`` while d(out)/d(grad_path) is the identity.
    """
    value = np.asarray(value, dtype=grad_path.data.dtype)
    if value.shape != grad_path.data.shape:
        raise ValueError(
            f"straight_through shapes differ: {value.shape} vs {grad_path.data.shape}"
        )

    def bwd(out):
        _accumulate(grad_path, out.grad, borrowed=True)

    return _make(value, (grad_path,), bwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """cos(a, b) = a.b / (|a||b|) for 1-D vectors; errors on zero norm.

    The forward value is clipped to [-1, 1] to absorb last-ulp rounding; the
    gradient uses the analytic formula at the clipped value.
    """
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(
            f"cosine_similarity expects equal-length vectors, got {a.data.shape} and {b.data.shape}"
        )
    na = float(np.sqrt(a.data @ a.data))
    nb = float(np.sqrt(b.data @ b.data))
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("cosine_similarity: zero-norm input")
    c = float(a.data @ b.data) / (na * nb)
    c = min(1.0, max(-1.0, c))
    out_data = np.asarray(c, dtype=a.data.dtype)

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g * (b.data / (na * nb) - a.data * (c / (na * na))))
        if b.requires_grad:
            _accumulate(b, g * (a.data / (na * nb) - b.data * (c / (nb * nb))))

    return _make(out_data, (a, b), bwd)


# ----------------------------------------------------------------------
# differentiable warp

def _mesh(n: int, dtype) -> np.ndarray:
    # normalized pixel-center coordinates, align-corners convention:
    # index i of an axis of length n maps to (2i - (n-1)) / (n-1), and a
    # length-1 axis collapses to its center 0.
    denom = max(n - 1, 1)
    coords = (2.0 * np.arange(n, dtype=np.float64) - (n - 1)) / denom
    return coords.astype(dtype)


def affine_grid(theta, r_w, r_h, out_h: int, out_w: int) -> Tensor:
    """Sampling grid for "rotate by theta about the center, then scale the
    unit text box to the central (r_w, r_h) fraction of the output".

    Returns an (out_h, out_w, 2) tensor of (x, y) source coordinates in the
    text image's normalized [-1, 1] frame (align-corners convention). The
    grid holds the inverse map, so downstream bilinear sampling paints the
    forward-transformed text; it is differentiable w.r.t. theta, r_w, r_h.
    No translation: the overlay stays anchored at the image center.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("affine_grid: output dims must be >= 1")
    tensors = [v for v in (theta, r_w, r_h) if isinstance(v, Tensor)]
    dtype = tensors[0].data.dtype if tensors else np.float32
    theta = _as_tensor(theta, dtype)
    r_w = _as_tensor(r_w, dtype)
    r_h = _as_tensor(r_h, dtype)
    for name, v in (("theta", theta), ("r_w", r_w), ("r_h", r_h)):
        if not np.all(np.isfinite(v.data)):
            raise ValueError(f"affine_grid: non-finite {name}")
    for name, v in (("r_w", r_w), ("r_h", r_h)):
        if np.any(v.data <= 0.0) or np.any(v.data > 1.0):
            raise ValueError(f"affine_grid: {name} outside (0, 1]")

    px = Tensor(np.broadcast_to(_mesh(out_w, dtype), (out_h, out_w)).copy())
    py = Tensor(np.broadcast_to(_mesh(out_h, dtype)[:, None], (out_h, out_w)).copy())

    c = cos(theta)
    s = sin(theta)
    # inverse of rotate-then-scale: u = S(1/r) R(-theta) p
    ux = _div(_add(_mul(c, px), _mul(s, py)), r_w)
    uy = _div(_add(_mul(-s, px), _mul(c, py)), r_h)
    return concat([ux.reshape(out_h, out_w, 1), uy.reshape(out_h, out_w, 1)], axis=2)


def grid_sample_bilinear(image: Tensor, grid: Tensor) -> Tensor:
    """Sample image (C, h, w) at grid (H, W, 2) with bilinear interpolation.

    Grid values are normalized source coordinates (align-corners); samples
    falling outside the source extent read zero padding. Differentiable
    w.r.t. both the image values and the grid coordinates.
    """
    if image.data.ndim != 3:
        raise ValueError(f"grid_sample expects a (C, h, w) image, got {image.data.shape}")
    if grid.data.ndim != 3 or grid.data.shape[-1] != 2:
        raise ValueError(f"grid_sample expects an (H, W, 2) grid, got {grid.data.shape}")
    ch, h, w = image.data.shape
    img = image.data
    half_w = (w - 1) / 2.0
    half_h = (h - 1) / 2.0

    gx = grid.data[..., 0]
    gy = grid.data[..., 1]
    xs = (gx + 1.0) * half_w
    ys = (gy + 1.0) * half_h
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    dx = xs - x0
    dy = ys - y0

    corners = []
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)] * valid
        corners.append((yy, xx, valid, vals))
    v00, v01, v10, v11 = (c[3] for c in corners)

    top = (1.0 - dx) * v00 + dx * v01
    bot = (1.0 - dx) * v10 + dx * v11
    out_data = (1.0 - dy) * top + dy * bot

    def bwd(out):
        g = out.grad
        if image.requires_grad:
            buf = np.zeros_like(img)
            weights = ((1.0 - dy) * (1.0 - dx), (1.0 - dy) * dx, dy * (1.0 - dx), dy * dx)
            for (yy, xx, valid, _), wgt in zip(corners, weights):
                contrib = g * wgt
                sel = valid.nonzero()
                np.add.at(buf, (slice(None), yy[sel], xx[sel]), contrib[:, sel[0], sel[1]])
            _accumulate(image, buf)
        if grid.requires_grad:
            d_xs = (g * ((1.0 - dy) * (v01 - v00) + dy * (v11 - v10))).sum(axis=0) * half_w
            d_ys = (g * ((1.0 - dx) * (v10 - v00) + dx * (v11 - v01))).sum(axis=0) * half_h
            _accumulate(grid, np.stack([d_xs, d_ys], axis=-1).astype(grid.data.dtype))

    return _make(out_data, (image, grid), bwd)


# ----------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, release: bool = False):
    """Accumulate d(root)/d(leaf) on every requires_grad leaf.

    root must be a scalar (size-1) tensor on the tape. With release=True the
    visited graph is cleared afterwards, dropping saved intermediates.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad")
    order = _topo_order(root)
    for node in order:
        # fresh buffers for interior nodes; only leaves accumulate across calls
        if node._backward is not None:
            node.grad = None
    _accumulate(root, np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
    if release:
        for node in order:
            if node._backward is not None:
                node.grad = None
            node._parents = ()
            node._backward = None


def release_graph(root: Tensor):
    """Clear tape references below root without running backward."""
    for node in _topo_order(root):
        node._parents = ()
        node._backward = None
