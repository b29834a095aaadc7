"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the prototype models actually need are implemented:
2-d convolution, channel bias, a handful of elementwise functions,
patch-to-prototype distances, spatial/selected minima, matmul, full
reductions, and a fused cross-entropy. Shapes must match exactly; the
only broadcasting supported is scalar-with-tensor. Everything runs in
float64 so finite-difference checks are stable and runs are bit
reproducible.

A Tensor doubles as a node of the compute graph: it carries the cached
forward value, references to its parents, and the backward rule that
scatters its gradient into them. Graph edges are only recorded when a
parent requires gradients, so frozen subgraphs (e.g. a teacher model)
cost nothing at backward time.
"""

import zlib

import numpy as np

from .errors import (
    DataError,
    DimensionError,
    DomainError,
    NumericError,
    UsageError,
)


class Tensor:
    """Float64 array plus optional gradient and backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = ()
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no graph attached."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("backward called on a non-finite loss")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the functional ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _topo_order(root):
    """Parents-first topological order; each node visited exactly once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _node(data, parents, backward, op) -> Tensor:
    """Wrap a forward result; record graph edges only if gradients can flow."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    out = Tensor(data, requires_grad=True, op=op)
    out._parents = tuple(parents)
    out._backward = lambda: backward(out)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    """Allow exact shape match or one scalar operand; reject anything else."""
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{opname}: shapes {a.data.shape} and {b.data.shape} are incompatible")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(out):
        _accum(a, _reduce_to(out.grad, a.data.shape) if a.data.size == 1 else out.grad)
        _accum(b, _reduce_to(out.grad, b.data.shape) if b.data.size == 1 else out.grad)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(out):
        _accum(a, _reduce_to(out.grad, a.data.shape) if a.data.size == 1 else out.grad)
        _accum(b, _reduce_to(-out.grad, b.data.shape) if b.data.size == 1 else -out.grad)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(out):
        ga = out.grad * b.data
        gb = out.grad * a.data
        _accum(a, _reduce_to(ga, a.data.shape) if a.data.size == 1 else ga)
        _accum(b, _reduce_to(gb, b.data.shape) if b.data.size == 1 else gb)

    return _node(a.data * b.data, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)

    def bw(out):
        _accum(x, out.grad * (x.data > 0.0))

    return _node(np.maximum(x.data, 0.0), (x,), bw, "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # Split by sign so exp never overflows.
    pos = x.data >= 0
    y = np.empty_like(x.data)
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bw(out):
        _accum(x, out.grad * y * (1.0 - y))

    return _node(y, (x,), bw, "sigmoid")


def square(x) -> Tensor:
    x = _as_tensor(x)

    def bw(out):
        _accum(x, out.grad * 2.0 * x.data)

    return _node(x.data * x.data, (x,), bw, "square")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")

    def bw(out):
        _accum(x, out.grad / x.data)

    return _node(np.log(x.data), (x,), bw, "log")


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    dc = dcols.reshape(n, c, k, k, ho, wo)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dc[:, :, di, dj]
    if pad:
        return dxp[:, :, pad:h + pad, pad:w + pad]
    return dxp


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) of NCHW input with an OIkk kernel.

    Output spatial size is floor((H + 2*pad - k) / stride) + 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects x of shape (N,C,H,W) and kernel (O,C,k,k)")
    n, cin, h, w = x.data.shape
    cout, cin_k, k, k2 = kernel.data.shape
    if k != k2:
        raise DimensionError("conv2d kernel must be square")
    if cin != cin_k:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if pad < 0:
        raise DimensionError("conv2d padding must be >= 0")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError("conv2d kernel larger than padded input")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(cout, cin * k * k)
    # overflow surfaces as the NumericError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        y = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if not np.isfinite(y).all():
        raise NumericError("conv2d produced non-finite values")

    def bw(out):
        g = out.grad.reshape(n, cout, ho * wo)
        if kernel.requires_grad:
            dw = np.einsum("nop,ncp->oc", g, cols).reshape(kernel.data.shape)
            _accum(kernel, dw)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            _accum(x, _col2im(dcols, x.data.shape, k, stride, pad, ho, wo))

    return _node(y, (x, kernel), bw, "conv2d")


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 4 or b.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise DimensionError("bias_add expects (N,C,H,W) input and (C,) bias")

    def bw(out):
        _accum(x, out.grad)
        _accum(b, out.grad.sum(axis=(0, 2, 3)))

    return _node(x.data + b.data[None, :, None, None], (x, b), bw, "bias_add")


def batch_patch_distances(fmap, prototypes) -> Tensor:
    """Euclidean distance of every feature-map patch to every prototype.

    fmap has shape (N, d, H, W), prototypes (m, d); output is (N, m, H, W)
    with out[n, p, i, j] = || fmap[n, :, i, j] - prototypes[p] ||_2.
    """
    fmap, prototypes = _as_tensor(fmap), _as_tensor(prototypes)
    if fmap.ndim != 4 or prototypes.ndim != 2:
        raise DimensionError("batch_patch_distances expects (N,d,H,W) and (m,d)")
    if fmap.data.shape[1] != prototypes.data.shape[1]:
        raise DimensionError(
            f"feature depth {fmap.data.shape[1]} != prototype depth {prototypes.data.shape[1]}")

    # diff[n, p, c, i, j]; sizes stay small at desk scale so the explicit
    # difference is both faster to get right and more accurate than the
    # ||a||^2 + ||b||^2 - 2ab expansion near zero distance.
    diff = fmap.data[:, None, :, :, :] - prototypes.data[None, :, :, None, None]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def bw(out):
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(dist > 0.0, out.grad / np.where(dist > 0.0, dist, 1.0), 0.0)
        if fmap.requires_grad:
            _accum(fmap, np.einsum("npij,npcij->ncij", r, diff))
        if prototypes.requires_grad:
            _accum(prototypes, -np.einsum("npij,npcij->pc", r, diff))

    return _node(dist, (fmap, prototypes), bw, "patch_distances")


def spatial_min(x) -> Tensor:
    """Minimum over the trailing two spatial axes: (N, m, H, W) -> (N, m).

    Gradient is routed to the first (row-major) minimiser, matching the
    lexicographic tie-break used everywhere else.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("spatial_min expects a (N,m,H,W) tensor")
    n, m, h, w = x.data.shape
    flat = x.data.reshape(n, m, h * w)
    k = flat.argmin(axis=2)
    vals = np.take_along_axis(flat, k[:, :, None], axis=2)[:, :, 0]

    def bw(out):
        dflat = np.zeros_like(flat)
        dflat[np.arange(n)[:, None], np.arange(m)[None, :], k] = out.grad
        _accum(x, dflat.reshape(x.data.shape))

    return _node(vals, (x,), bw, "spatial_min")


def select_min(x, allowed: np.ndarray) -> Tensor:
    """Per-row minimum of x over the entries where `allowed` is True.

    x has shape (N, m) and allowed is a boolean mask of the same shape.
    Every row must allow at least one entry.
    """
    x = _as_tensor(x)
    allowed = np.asarray(allowed, dtype=bool)
    if x.ndim != 2 or allowed.shape != x.data.shape:
        raise DimensionError("select_min expects (N,m) values and a same-shape boolean mask")
    if not allowed.any(axis=1).all():
        raise DataError("select_min: some row has no allowed entries")
    masked = np.where(allowed, x.data, np.inf)
    k = masked.argmin(axis=1)
    n = x.data.shape[0]
    vals = x.data[np.arange(n), k]

    def bw(out):
        dx = np.zeros_like(x.data)
        dx[np.arange(n), k] = out.grad
        _accum(x, dx)

    return _node(vals, (x,), bw, "select_min")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain")

    def bw(out):
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)

    def bw(out):
        _accum(x, np.full_like(x.data, float(out.grad)))

    return _node(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    size = x.data.size

    def bw(out):
        _accum(x, np.full_like(x.data, float(out.grad) / size))

    return _node(np.asarray(x.data.mean()), (x,), bw, "mean")


def l2_norm_rows(x) -> Tensor:
    """Flat L2 norm over all axes but the first: (N, ...) -> (N,).

    At a zero norm the (sub)gradient is taken to be zero.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("l2_norm_rows expects at least two axes")
    n = x.data.shape[0]
    flat = x.data.reshape(n, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))

    def bw(out):
        safe = np.where(norms > 0.0, norms, 1.0)
        scale = np.where(norms > 0.0, out.grad / safe, 0.0)
        _accum(x, (flat * scale[:, None]).reshape(x.data.shape))

    return _node(norms, (x,), bw, "l2_norm_rows")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (N,C) logits")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError("cross_entropy labels must have shape (N,)")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(n), labels]).mean())

    def bw(out):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(n), labels] -= 1.0
        _accum(logits, float(out.grad) / n * soft)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# optimisation and randomness
# ---------------------------------------------------------------------------

class SGD:
    """Plain SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.

    step() clears the gradients of the parameters it updates.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise UsageError("SGD given a parameter with requires_grad=False")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise UsageError("SGD.step called before gradients were populated")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None


def subseed(seed: int, *labels) -> np.random.Generator:
    """Deterministic labelled child generator of a 64-bit root seed.

    The labels are hashed into a spawn key, so distinct module/stream
    names give independent streams while any (seed, labels) pair is
    reproducible across runs and platforms.
    """
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def assert_finite(value, what: str) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} became non-finite")
