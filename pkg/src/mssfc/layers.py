"""Neural building blocks: convolution, pooling, attention, norm, Adam.

Convolution is an explicit window gather (im2col) with a matching scatter
backward; pooling shares the same window machinery.  Token layers treat the
height axis as the sequence axis of (n, dim, length, 1) tensors.
"""

from __future__ import annotations

import numpy as np

from .tensor import ParamStore, Rng, ShapeError, Tensor, _accum


class OptimError(RuntimeError):
    """Raised when an optimizer step sees a non-finite gradient."""


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, k, stride, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * oh:stride,
                                    kj:kj + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(dcols, xp_shape, k, stride, oh, ow):
    n, c, hp, wp = xp_shape
    dc = dcols.reshape(n, c, k, k, oh, ow)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride] += dc[:, :, ki, kj]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}x{kw}")
    k = kh
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h}x{w} (pad {pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    w2 = weight.data.reshape(co, ci * k * k)
    y = np.matmul(w2, cols).reshape(n, co, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        if bias.shape != (1, co, 1, 1):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected (1,{co},1,1)")
        y = y + bias.data
    out = Tensor(y, parents=parents)

    def backward(g):
        g2 = g.reshape(n, co, oh * ow)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))
        _accum(weight, np.einsum("nol,nfl->of", g2, cols,
                                 optimize=True).reshape(weight.shape))
        if x.requires_grad:
            dcols = np.einsum("of,nol->nfl", w2, g2, optimize=True)
            dxp = _col2im(dcols, xp.shape, k, stride, oh, ow)
            _accum(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    out._backward = backward
    return out


class Conv2dLayer:
    """Convolution with parameters owned by a ParamStore.

    pad defaults to (k-1)//2 so stride-1 layers preserve spatial size.
    Init is variance-preserving: normal(0, 1/sqrt(fan_in)).
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: Rng, stride: int = 1, pad: int | None = None, bias: bool = True):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        fan_in = c_in * k * k
        self.weight = store.create(f"{name}.weight",
                                   rng.normal(0.0, fan_in ** -0.5, (c_out, c_in, k, k)))
        self.bias = store.create(f"{name}.bias", np.zeros((1, c_out, 1, 1))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return conv2d(x, self.weight.tensor, b, stride=self.stride, pad=self.pad)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, mode: str, k: int, stride: int, pad: int = 0) -> Tensor:
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool2d: window {k} exceeds padded input {h}x{w}")
    if mode == "avg":
        fill = 0.0
    elif mode == "max":
        fill = -np.inf
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=fill) if pad else x.data
    stack = np.stack([xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
                      for ki in range(k) for kj in range(k)], axis=-1)
    if mode == "avg":
        # divisor counts only non-padding cells so constants pool to themselves
        ones = np.pad(np.ones((h, w), dtype=x.data.dtype), pad) if pad \
            else np.ones((h, w), dtype=x.data.dtype)
        counts = np.stack([ones[ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
                           for ki in range(k) for kj in range(k)], axis=-1).sum(axis=-1)
        out = Tensor(stack.sum(axis=-1) / counts, parents=(x,))

        def backward(g):
            gw = g / counts
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * oh:stride,
                        kj:kj + stride * ow:stride] += gw
            _accum(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

        out._backward = backward
        return out

    am = stack.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = Tensor(np.take_along_axis(stack, am[..., None], axis=-1)[..., 0], parents=(x,))

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            ki, kj = divmod(idx, k)
            dxp[:, :, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride] += g * (am == idx)
        _accum(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# token layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map per token; weight is (d_out, d_in, 1, 1)."""
    if weight.shape[2:] != (1, 1):
        raise ShapeError(f"linear: weight must be (o,i,1,1), got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, pad=0)


class LinearLayer:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: Rng, bias: bool = True):
        self.weight = store.create(f"{name}.weight",
                                   rng.normal(0.0, d_in ** -0.5, (d_out, d_in, 1, 1)))
        self.bias = store.create(f"{name}.bias", np.zeros((1, d_out, 1, 1))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return linear(x, self.weight.tensor, b)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token zero mean / unit variance over channels, then affine."""
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layer_norm: token width must be >= 2")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + shift.data, parents=(x, gain, shift))

    def backward(g):
        _accum(gain, (g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        _accum(shift, g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    out._backward = backward
    return out


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gain = store.create(f"{name}.gain", np.ones((1, d, 1, 1)))
        self.shift = store.create(f"{name}.shift", np.zeros((1, d, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain.tensor, self.shift.tensor)


def _softmax_lastaxis(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over already-projected token tensors."""
    n, d, lq, _ = q.shape
    lk = k.shape[2]
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    if k.shape != (n, d, lk, 1) or v.shape != (n, d, lk, 1):
        raise ShapeError(f"attention: key/value shapes {k.shape}/{v.shape} mismatch")
    dh = d // heads
    qh = q.data[:, :, :, 0].reshape(n, heads, dh, lq)
    kh = k.data[:, :, :, 0].reshape(n, heads, dh, lk)
    vh = v.data[:, :, :, 0].reshape(n, heads, dh, lk)
    scores = np.einsum("nhdq,nhdk->nhqk", qh, kh, optimize=True) / np.sqrt(dh)
    a = _softmax_lastaxis(scores)
    y = np.einsum("nhqk,nhdk->nhdq", a, vh, optimize=True)
    out = Tensor(y.reshape(n, d, lq, 1), parents=(q, k, v))

    def backward(g):
        gh = g[:, :, :, 0].reshape(n, heads, dh, lq)
        _accum(v, np.einsum("nhqk,nhdq->nhdk", a, gh,
                            optimize=True).reshape(n, d, lk, 1))
        da = np.einsum("nhdq,nhdk->nhqk", gh, vh, optimize=True)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds /= np.sqrt(dh)
        _accum(q, np.einsum("nhqk,nhdk->nhdq", ds, kh,
                            optimize=True).reshape(n, d, lq, 1))
        _accum(k, np.einsum("nhqk,nhdq->nhdk", ds, qh,
                            optimize=True).reshape(n, d, lk, 1))

    out._backward = backward
    return out


def attention_weights(q: Tensor, k: Tensor, heads: int):
    """Softmax weights (n, heads, lq, lk) for inspection; no gradient."""
    n, d, lq, _ = q.shape
    lk = k.shape[2]
    dh = d // heads
    qh = q.data[:, :, :, 0].reshape(n, heads, dh, lq)
    kh = k.data[:, :, :, 0].reshape(n, heads, dh, lk)
    scores = np.einsum("nhdq,nhdk->nhqk", qh, kh, optimize=True) / np.sqrt(dh)
    return _softmax_lastaxis(scores)


class AttentionLayer:
    """Multi-head attention; self-attention when queries is also keys/values."""

    def __init__(self, store: ParamStore, name: str, d_model: int, heads: int, rng: Rng):
        if d_model % heads:
            raise ShapeError(f"{name}: d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_model = d_model
        self.q_proj = LinearLayer(store, f"{name}.q_proj", d_model, d_model, rng)
        # no key bias: a per-channel shift on every key adds the same constant
        # to each row of attention logits, which softmax cancels exactly
        self.k_proj = LinearLayer(store, f"{name}.k_proj", d_model, d_model, rng, bias=False)
        self.v_proj = LinearLayer(store, f"{name}.v_proj", d_model, d_model, rng)
        self.out_proj = LinearLayer(store, f"{name}.out_proj", d_model, d_model, rng)

    def __call__(self, queries: Tensor, keys_values: Tensor | None = None) -> Tensor:
        kv = queries if keys_values is None else keys_values
        y = attention(self.q_proj(queries), self.k_proj(kv), self.v_proj(kv), self.heads)
        return self.out_proj(y)

    def weights(self, queries: Tensor, keys_values: Tensor | None = None):
        kv = queries if keys_values is None else keys_values
        return attention_weights(self.q_proj(queries), self.k_proj(kv), self.heads)


def mha(layer: AttentionLayer, queries: Tensor, keys_values: Tensor | None = None) -> Tensor:
    return layer(queries, keys_values)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected Adam with coupled L2 weight decay."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 5e-4):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m = {p.name: np.zeros_like(p.value) for p in store}
        self.v = {p.name: np.zeros_like(p.value) for p in store}


def adam_step(state: AdamState, store: ParamStore):
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in store:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient in parameter {p.name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.value[...] -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.value.dtype)
