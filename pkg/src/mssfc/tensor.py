"""Dense rank-4 tensor core with reverse-mode differentiation.

Every value in the framework is a (n, c, h, w) row-major array wrapped in a
Tensor.  Token sequences and scalars are degenerate rank-4 tensors
(tokens: (n, dim, length, 1); scalars: (1, 1, 1, 1)), which keeps a single
kernel set and a uniform gradient-check path.

Each differentiable op records its input tensors and an explicit backward
closure; Tensor.backward() replays the graph in reverse topological order
and accumulates gradients additively into the participating tensors.
Broadcasting is deliberately restricted: binary elementwise ops only
broadcast the second operand from c=1.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


class GradcheckError(RuntimeError):
    """Raised when a finite-difference check hits a non-finite value."""


def _as4(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"tensors are rank-4 (n,c,h,w), got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dims must be >= 1, got shape {arr.shape}")
    return arr


class Tensor:
    """Immutable-by-convention dense rank-4 value with an optional grad slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = _as4(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Parameter:
    """A named leaf tensor with an accumulated gradient slot."""

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(_as4(value), requires_grad=True)

    @property
    def value(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered, uniquely-named parameter collection (single writer)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def total_scalars(self):
        return sum(int(np.prod(p.shape)) for p in self._params.values())

    def census(self):
        """Mapping name -> shape; a pure function of the construction path."""
        return {name: tuple(p.shape) for name, p in self._params.items()}


class Rng:
    """Counter-based seedable generator (Philox): same seed, same stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def fork(self, tag: int) -> "Rng":
        return Rng(self.seed * 1_000_000_007 + int(tag) + 1)

    def uniform(self, low, high, shape, dtype=np.float64):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, mean, std, shape, dtype=np.float64):
        return self._gen.normal(mean, std, size=shape).astype(dtype)

    def integers(self, low, high):
        return int(self._gen.integers(low, high))

    def random(self):
        return float(self._gen.random())

    def permutation(self, n):
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_prep(a: Tensor, b: Tensor, opname: str):
    """Validate shapes; returns True when b broadcasts from c=1."""
    if a.shape == b.shape:
        return False
    n, c, h, w = a.shape
    if b.shape == (n, 1, h, w) and c > 1:
        return True
    raise ShapeError(f"{opname}: shape {b.shape} does not match {a.shape} "
                     "(only c=1 channel broadcast is allowed)")


def _unbroadcast_c(g, broadcast):
    return g.sum(axis=1, keepdims=True) if broadcast else g


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _binary_prep(a, b, "add")
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        _accum(a, g)
        _accum(b, _unbroadcast_c(g, bc))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    bc = _binary_prep(a, b, "sub")
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward(g):
        _accum(a, g)
        _accum(b, -_unbroadcast_c(g, bc))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    bc = _binary_prep(a, b, "mul")
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, _unbroadcast_c(g * a.data, bc))

    out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    bc = _binary_prep(a, b, "div")
    out = Tensor(a.data / b.data, parents=(a, b))

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, _unbroadcast_c(-g * a.data / (b.data * b.data), bc))

    out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.dtype.type(s), parents=(a,))
    out._backward = lambda g: _accum(a, g * s)
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + a.dtype.type(s), parents=(a,))
    out._backward = lambda g: _accum(a, g)
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), parents=(a,))
    out._backward = lambda g: _accum(a, g * np.sign(a.data))
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even where the dtype would round to 0 or 1
    one = x.dtype.type(1)
    np.clip(y, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)), out=y)
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(a.data, a.dtype.type(floor)), parents=(a,))
    mask = a.data > floor
    out._backward = lambda g: _accum(a, g * mask)
    return out


_EW_UNARY = {"abs": abs_, "sigmoid": sigmoid}
_EW_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def ew(op: str, a: Tensor, b=None) -> Tensor:
    """Elementwise dispatcher: add|sub|mul|div|abs|sigmoid|scale."""
    if op in _EW_UNARY:
        return _EW_UNARY[op](a)
    if op == "scale":
        return scale(a, b)
    if op in _EW_BINARY:
        if isinstance(b, (int, float)) and op == "mul":
            return scale(a, b)
        return _EW_BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# channel reductions and reshaping


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    out = Tensor(x.data.mean(axis=1, keepdims=True), parents=(x,))
    out._backward = lambda g: _accum(x, np.broadcast_to(g / c, x.shape).copy())
    return out


def channel_var(x: Tensor) -> Tensor:
    """Population variance across the channel axis; output c=1."""
    c = x.shape[1]
    m = x.data.mean(axis=1, keepdims=True)
    d = x.data - m
    out = Tensor((d * d).mean(axis=1, keepdims=True), parents=(x,))
    out._backward = lambda g: _accum(x, g * (2.0 / c) * d)
    return out


def channel_stats(x: Tensor, stat: str) -> Tensor:
    if stat == "mean":
        return channel_mean(x)
    if stat == "variance":
        return channel_var(x)
    raise ValueError(f"unknown channel stat {stat!r}")


def _concat(parts, axis, opname):
    if not parts:
        raise ShapeError(f"{opname}: empty part list")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"{opname}: incompatible shapes "
                             f"{parts[0].shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * 4
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    out._backward = backward
    return out


def _split(x, sizes, axis, opname):
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"{opname}: sizes {sizes} do not sum to {x.shape[axis]}")
    if any(s < 1 for s in sizes):
        raise ShapeError(f"{opname}: sizes must be >= 1, got {sizes}")
    outs = []
    offsets = np.cumsum([0] + list(sizes))
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * 4
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)
        part = Tensor(x.data[idx].copy(), parents=(x,))

        def backward(g, idx=idx):
            if x.grad is None and x.requires_grad:
                x.grad = np.zeros_like(x.data)
            if x.requires_grad:
                x.grad[idx] += g

        part._backward = backward
        outs.append(part)
    return outs


def concat_c(parts) -> Tensor:
    return _concat(list(parts), 1, "concat_c")


def split_c(x: Tensor, sizes) -> list:
    return _split(x, list(sizes), 1, "split_c")


def concat_h(parts) -> Tensor:
    return _concat(list(parts), 2, "concat_h")


def split_h(x: Tensor, sizes) -> list:
    return _split(x, list(sizes), 2, "split_h")


def flatten_hw(x: Tensor) -> Tensor:
    """(n,c,h,w) -> (n,c,h*w,1) token view."""
    n, c, h, w = x.shape
    out = Tensor(x.data.reshape(n, c, h * w, 1).copy(), parents=(x,))
    out._backward = lambda g: _accum(x, g.reshape(n, c, h, w))
    return out


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 batch/height axes to a target shape."""
    shape = tuple(shape)
    for axis in (1, 3):
        if x.shape[axis] != shape[axis]:
            raise ShapeError(f"expand: only n/h axes may grow, {x.shape} -> {shape}")
    axes = tuple(ax for ax in (0, 2) if x.shape[ax] != shape[ax])
    if any(x.shape[ax] != 1 for ax in axes):
        raise ShapeError(f"expand: source axis must be 1, {x.shape} -> {shape}")
    out = Tensor(np.broadcast_to(x.data, shape).copy(), parents=(x,))
    out._backward = lambda g: _accum(x, g.sum(axis=axes, keepdims=True))
    return out


# ---------------------------------------------------------------------------
# spatial resampling


def _linear_matrix(n_out, n_in, factor, dtype):
    """Interpolation matrix for align-corners=false bilinear sampling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        out = Tensor(x.data.copy(), parents=(x,))
        out._backward = lambda g: _accum(x, g)
        return out
    n, c, h, w = x.shape
    if mode == "nearest":
        out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3),
                     parents=(x,))

        def backward(g):
            gr = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            _accum(x, gr)

        out._backward = backward
        return out
    if mode == "bilinear":
        mh = _linear_matrix(h * factor, h, factor, x.data.dtype)
        mw = _linear_matrix(w * factor, w, factor, x.data.dtype)
        y = np.einsum("ij,ncjk,lk->ncil", mh, x.data, mw, optimize=True)
        out = Tensor(y, parents=(x,))

        def backward(g):
            _accum(x, np.einsum("ij,ncil,lk->ncjk", mh, g, mw, optimize=True))

        out._backward = backward
        return out
    raise ValueError(f"unknown upsample mode {mode!r}")


def channel_dot(f: Tensor, e: Tensor) -> Tensor:
    """Per-pixel inner product over channels: (n,c,h,w) x (n,c,1,1) -> (n,1,h,w)."""
    n, c, h, w = f.shape
    if e.shape != (n, c, 1, 1):
        raise ShapeError(f"channel_dot: embedding shape {e.shape} "
                         f"does not match features {f.shape}")
    y = np.einsum("nchw,nc->nhw", f.data, e.data[:, :, 0, 0], optimize=True)
    out = Tensor(y[:, None], parents=(f, e))

    def backward(g):
        _accum(f, g * e.data)
        _accum(e, (f.data * g).sum(axis=(2, 3), keepdims=True))

    out._backward = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out = Tensor(x.data.mean().reshape(1, 1, 1, 1), parents=(x,))
    out._backward = lambda g: _accum(x, np.full_like(x.data, g.reshape(())) / size)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum().reshape(1, 1, 1, 1), parents=(x,))
    out._backward = lambda g: _accum(x, np.full_like(x.data, g.reshape(())))
    return out


def bce_with_logits(z: Tensor, labels, sample_weights=None) -> Tensor:
    """Mean per-pixel binary cross-entropy, computed stably from logits.

    sample_weights (length n) scale each sample's mean and the total is
    divided by max(1, sum(weights)), so zero-weighted samples contribute
    nothing to value or gradient.
    """
    y = np.asarray(labels, dtype=z.data.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce: labels {y.shape} do not match logits {z.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce: labels must be binary {0,1}")
    n = z.shape[0]
    pixels = z.data[0].size
    if sample_weights is None:
        w = np.ones(n, dtype=z.data.dtype)
    else:
        w = np.asarray(sample_weights, dtype=z.data.dtype).reshape(n)
    per_pixel = np.maximum(z.data, 0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    per_sample = per_pixel.reshape(n, -1).mean(axis=1)
    denom = max(1.0, float(w.sum()))
    out = Tensor(((w * per_sample).sum() / denom).reshape(1, 1, 1, 1), parents=(z,))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-np.abs(z.data)))
        sig = np.where(z.data >= 0, sig, 1.0 - sig)
        gg = g.reshape(()) * w[:, None, None, None] / (pixels * denom)
        _accum(z, gg * (sig - y))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradcheck(f, p: Parameter, coords=None, n_coords=64, rng: Rng | None = None):
    """Max relative error between analytic and central-difference gradients.

    f is a deterministic scalar closure over the parameter's store; run it
    under float64 parameters for tight tolerances.  Step per coordinate is
    h = 1e-4 * max(1, |theta|).
    """
    p.zero_grad()
    out = f()
    if not np.isfinite(out.item()):
        raise GradcheckError(f"non-finite objective for {p.name}")
    out.backward()
    if p.grad is None:
        ga = np.zeros_like(p.value)
    else:
        ga = p.grad.copy()
    if not np.all(np.isfinite(ga)):
        bad = np.argwhere(~np.isfinite(ga))[0]
        raise GradcheckError(f"non-finite gradient for {p.name} at {tuple(bad)}")

    flat = p.value.reshape(-1)
    size = flat.size
    if coords is None:
        if size <= n_coords:
            coords = np.arange(size)
        else:
            if rng is None:
                rng = Rng(0)
            coords = rng.permutation(size)[:n_coords]
    max_err = 0.0
    for idx in np.asarray(coords).reshape(-1):
        idx = int(idx)
        theta = flat[idx]
        h = 1e-4 * max(1.0, abs(theta))
        flat[idx] = theta + h
        f_plus = f().item()
        flat[idx] = theta - h
        f_minus = f().item()
        flat[idx] = theta
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradcheckError(f"non-finite objective for {p.name} at coord {idx}")
        g_fd = (f_plus - f_minus) / (2.0 * h)
        g_a = ga.reshape(-1)[idx]
        err = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
        max_err = max(max_err, err)
    return max_err
