"""The four computational blocks of the network.

- MsffBlock: parallel 1/3/5/7 convolution paths fused by concat + 1x1 conv.
- SsfcBlock: parameter-free spatial-spectral attention from pooled
  query/key differences through a Gaussian-kernel sigmoid.
- DmfeBlock: channel-split dual branch (MSFF || SSFC) with a residual.
- MdfmBlock: absolute-difference features gated back onto both temporal
  streams and fused with a 3x3 convolution.
"""

from __future__ import annotations

from .layers import Conv2dLayer, pool2d
from .tensor import (ParamStore, Rng, ShapeError, Tensor, abs_, add_scalar,
                     channel_mean, channel_var, clamp_min, concat_c, div, mul,
                     scale, sigmoid, split_c, sub, upsample)

SSFC_EPS = 1e-5


class MsffBlock:
    """Multi-scale fusion: four parallel paths, each emitting c/4 channels."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: Rng):
        if channels % 4:
            raise ShapeError(f"{name}: channels {channels} not divisible by 4")
        c4 = channels // 4
        self.path1 = Conv2dLayer(store, f"{name}.p1", channels, c4, 1, rng)
        self.paths = []
        for k in (3, 5, 7):
            reduce = Conv2dLayer(store, f"{name}.p{k}.reduce", channels, c4, 1, rng)
            spatial = Conv2dLayer(store, f"{name}.p{k}.conv", c4, c4, k, rng)
            expand_ = Conv2dLayer(store, f"{name}.p{k}.expand", c4, c4, 1, rng)
            self.paths.append((reduce, spatial, expand_))
        self.fuse = Conv2dLayer(store, f"{name}.fuse", channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        outs = [self.path1(x)]
        for reduce, spatial, expand_ in self.paths:
            outs.append(expand_(spatial(reduce(x))))
        return self.fuse(concat_c(outs))


def _pool_branch(x: Tensor, mode: str) -> Tensor:
    if mode == "avg":
        return pool2d(x, "avg", k=3, stride=2, pad=1)
    if mode == "max":
        return pool2d(x, "max", k=2, stride=2, pad=0)
    if mode == "none":
        return x
    raise ValueError(f"unknown pooling mode {mode!r}")


class SsfcBlock:
    """Spatial-spectral attention whose weight computation is parameter-free.

    The only trainable tensors are the four 1x1 projections and the fusing
    1x1 conv; the attention map itself is a closed-form function of pooled
    query/key differences.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, rng: Rng,
                 query_pool: str = "avg", key_pool: str = "max",
                 vbar_source: str = "proj", eps: float = SSFC_EPS):
        if channels % 2:
            raise ShapeError(f"{name}: channels {channels} must be even")
        if (query_pool == "none") != (key_pool == "none"):
            raise ValueError(f"{name}: query/key pooling must both be 'none' or both pool")
        if vbar_source not in ("proj", "input"):
            raise ValueError(f"{name}: vbar_source must be 'proj' or 'input'")
        half = channels // 2
        self.query_pool = query_pool
        self.key_pool = key_pool
        self.vbar_source = vbar_source
        self.eps = eps
        self.m_proj = Conv2dLayer(store, f"{name}.m_proj", channels, half, 1, rng)
        self.q_proj = Conv2dLayer(store, f"{name}.q_proj", channels, half, 1, rng)
        self.k_proj = Conv2dLayer(store, f"{name}.k_proj", channels, half, 1, rng)
        self.v_proj = Conv2dLayer(store, f"{name}.v_proj", channels, half, 1, rng)
        self.fuse = Conv2dLayer(store, f"{name}.fuse", channels, channels, 1, rng)

    def attention_map(self, x: Tensor) -> Tensor:
        """Sigmoid((Q̄-K̄)²/(2σ²) + 1/2); values lie in [sigmoid(0.5), 1)."""
        n, c, h, w = x.shape
        if self.query_pool != "none" and (h % 2 or w % 2):
            raise ShapeError(f"ssfc: pooled paths need even spatial dims, got {h}x{w}")
        qbar = _pool_branch(self.q_proj(x), self.query_pool)
        kbar = _pool_branch(self.k_proj(x), self.key_pool)
        d = sub(qbar, kbar)
        var = clamp_min(channel_var(d), self.eps)
        arg = div(scale(mul(d, d), 0.5), var)
        return sigmoid(add_scalar(arg, 0.5))

    def __call__(self, x: Tensor) -> Tensor:
        a = self.attention_map(x)
        factor = 1 if self.query_pool == "none" else 2
        vbar = channel_mean(self.v_proj(x) if self.vbar_source == "proj" else x)
        y = mul(upsample(a, factor, "nearest"), vbar)
        return self.fuse(concat_c([self.m_proj(x), y]))


class DmfeBlock:
    """Channel split into an MSFF branch and an SSFC branch, plus residual."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: Rng,
                 query_pool: str = "avg", key_pool: str = "max",
                 vbar_source: str = "proj"):
        if channels % 4:
            raise ShapeError(f"{name}: channels {channels} not divisible by 4")
        half = channels // 2
        self.half = half
        self.msff = MsffBlock(store, f"{name}.msff", half, rng)
        self.ssfc = SsfcBlock(store, f"{name}.ssfc", half, rng,
                              query_pool=query_pool, key_pool=key_pool,
                              vbar_source=vbar_source)

    def __call__(self, x: Tensor) -> Tensor:
        x_l, x_g = split_c(x, [self.half, self.half])
        return concat_c([self.msff(x_l), self.ssfc(x_g)]) + x


class MdfmBlock:
    """Differential fusion of two temporal feature maps.

    D = |x1-x2|, gate M = sigmoid(msff(D)), output D + conv3x3(S1+S2) where
    S_t = M*x_t.  The fuse conv acts on the sum of the gated streams, which
    is the weight-tied symmetric form of a conv over their concatenation:
    it makes the whole block invariant under swapping the temporal inputs,
    bit for bit, as the siamese symmetry contract requires.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, rng: Rng):
        if channels % 4:
            raise ShapeError(f"{name}: channels {channels} not divisible by 4")
        self.msff = MsffBlock(store, f"{name}.msff", channels, rng)
        self.fuse = Conv2dLayer(store, f"{name}.fuse", channels, channels, 3, rng)

    def difference_and_gate(self, x1: Tensor, x2: Tensor):
        if x1.shape != x2.shape:
            raise ShapeError(f"mdfm: temporal shapes differ: {x1.shape} vs {x2.shape}")
        d = abs_(sub(x1, x2))
        m = sigmoid(self.msff(d))
        return d, m

    def __call__(self, x1: Tensor, x2: Tensor) -> Tensor:
        d, m = self.difference_and_gate(x1, x2)
        s1 = mul(m, x1)
        s2 = mul(m, x2)
        return d + self.fuse(s1 + s2)
