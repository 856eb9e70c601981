"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package is built from a small set of differentiable
primitives on contiguous numpy arrays.  No broadcasting: elementwise ops
require identical shapes, all alignment is explicit via reshape/transpose.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
F64 = np.float64

_DTYPE_TOKEN = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TOKEN_DTYPE = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A dense n-d array that records the ops producing it for backprop.

    grad is allocated lazily on the first backward pass and accumulates
    across repeated backward() calls until zero_grad() is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(F32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_TOKEN[self.dtype]}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff machinery ----------------------------------------------

    def backward(self):
        """Backpropagate from a scalar loss to every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in topo:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                if node is not self:
                    # interior grads are transient; free them so repeated
                    # backward() accumulates only at the leaves
                    node.grad = None

    # -- primitive ops -----------------------------------------------------

    def add(self, other):
        _check_same_shape(self, other, "add")
        out = from_op(self.data + other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g)
            if other.requires_grad:
                other.accumulate_grad(g)

        out._backward_fn = bwd
        return out

    def sub(self, other):
        _check_same_shape(self, other, "sub")
        out = from_op(self.data - other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g)
            if other.requires_grad:
                other.accumulate_grad(-g)

        out._backward_fn = bwd
        return out

    def mul(self, other):
        _check_same_shape(self, other, "mul")
        out = from_op(self.data * other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g * other.data)
            if other.requires_grad:
                other.accumulate_grad(g * self.data)

        out._backward_fn = bwd
        return out

    def scale(self, s):
        s = float(s)
        out = from_op(self.data * self.dtype.type(s), (self,))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g * s)

        out._backward_fn = bwd
        return out

    def relu(self):
        out = from_op(np.maximum(self.data, self.dtype.type(0)), (self,))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g * (self.data > 0))  # subgradient at 0 is 0

        out._backward_fn = bwd
        return out

    def matmul(self, other):
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-d operands")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {self.shape} @ {other.shape}")
        out = from_op(self.data @ other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g @ other.data.T)
            if other.requires_grad:
                other.accumulate_grad(self.data.T @ g)

        out._backward_fn = bwd
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeError("transpose expects a 2-d tensor")
        out = from_op(np.ascontiguousarray(self.data.T), (self,))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g.T)

        out._backward_fn = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if int(np.prod(shape)) != self.size:
            raise ShapeError(f"reshape {self.shape} -> {shape} changes element count")
        out = from_op(self.data.reshape(shape), (self,))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(g.reshape(self.shape))

        out._backward_fn = bwd
        return out

    def sum(self):
        out = from_op(np.asarray(self.data.sum(), dtype=self.dtype), (self,))

        def bwd(g):
            if self.requires_grad:
                self.accumulate_grad(np.full_like(self.data, g))

        out._backward_fn = bwd
        return out

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.sub(other)

    def __mul__(self, other):
        return self.mul(other) if isinstance(other, Tensor) else self.scale(other)

    def __matmul__(self, other):
        return self.matmul(other)


def from_op(data, parents, backward_fn=None):
    """Build a graph node from raw result data and its parent tensors."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward_fn = backward_fn
    return out


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _check_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def zeros(shape, dtype=F32):
    return Tensor(np.zeros(shape, dtype=dtype))


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# -- deterministic RNG ---------------------------------------------------


class RngState:
    """Counter-based RNG: (seed, counter) fixes the scalar stream exactly.

    Every draw keys a fresh Philox generator on (seed, counter) and bumps
    the counter, so streams are reproducible bit-for-bit across platforms
    regardless of how many values each call consumes.
    """

    def __init__(self, seed, counter=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _gen(self):
        g = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter += 1
        return g

    def normal(self, shape, std=1.0, dtype=F32):
        return self._gen().normal(0.0, std, size=shape).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=F32):
        return self._gen().uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, size=None):
        return self._gen().integers(low, high, size=size)

    def child(self, index):
        """Independent stream for per-sample / per-trial seeding."""
        mixed = (self.seed * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
        return RngState(mixed)


# -- gradient checking ---------------------------------------------------


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function at tensor x.

    f receives a fresh Tensor each probe and must return a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data.copy())).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data.copy())).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value during finite differencing")
        out[i] = (fp - fm) / (2 * eps)
    return Tensor(out.reshape(x.shape))


def rel_error(a, b):
    """max_i |a-b| / max(1e-30, |a|+|b|) — symmetric relative error."""
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-30)
    return float(np.max(np.abs(a - b) / denom))


# -- shared tensor dump format -------------------------------------------
#
# One header line `TNSR <dtype> <ndim> <d0> <d1> ...\n` followed by raw
# little-endian scalars in row-major order.


def write_tensor(fh, t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    token = _DTYPE_TOKEN[arr.dtype]
    header = "TNSR %s %d %s\n" % (token, arr.ndim, " ".join(str(d) for d in arr.shape))
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr).astype("<" + arr.dtype.str[1:]).tobytes())


def read_tensor(fh):
    header = b""
    while not header.endswith(b"\n"):
        c = fh.read(1)
        if not c:
            raise IOError("truncated tensor header")
        header += c
    parts = header.decode("ascii").split()
    if len(parts) < 2 or parts[0] != "TNSR":
        raise IOError(f"bad tensor header: {header!r}")
    token = parts[1]
    if token not in _TOKEN_DTYPE:
        raise IOError(f"unknown dtype token: {token}")
    ndim = int(parts[2])
    shape = tuple(int(v) for v in parts[3 : 3 + ndim])
    if len(shape) != ndim:
        raise IOError("tensor header dimension mismatch")
    dt = np.dtype(_TOKEN_DTYPE[token]).newbyteorder("<")
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise IOError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(_TOKEN_DTYPE[token])
    return Tensor(arr)
