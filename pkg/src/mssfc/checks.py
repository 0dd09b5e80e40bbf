"""Finite-difference suites for ops, blocks, and the end-to-end network.

Each entry builds a float64 throwaway store, registers the tensors under
test as parameters, and compares analytic against central-difference
gradients.  The registries are consulted at call time so a test can inject
a broken op and confirm the suite catches it.
"""

from __future__ import annotations

import numpy as np

from . import blocks, layers, tensor
from .model import Model, ModelConfig
from .tensor import ParamStore, Rng, Tensor, fd_gradcheck

TOLERANCE = 1e-4

TINY_CONFIG = ModelConfig(base_channels=8, stage_channels=(8, 16), decoder_dim=32,
                          decoder_layers=2, heads=4, image_size=32, seed=7)


def _sq(y):
    return tensor.mean_all(tensor.mul(y, y))


def _run(build, seed, n_coords=64):
    store = ParamStore(np.float64)
    rng = Rng(seed)
    f = build(store, rng)
    return max(fd_gradcheck(f, p, n_coords=n_coords, rng=rng.fork(i))
               for i, p in enumerate(store))


# -- op builders -------------------------------------------------------------

def _pair(store, rng, low=-1.0, high=1.0):
    a = store.create("a", rng.uniform(low, high, (1, 3, 4, 4)))
    b = store.create("b", rng.uniform(low, high, (1, 1, 4, 4)))
    return a, b


def _away_from(x, value, margin):
    return np.where(np.abs(x - value) < margin, x + 2 * margin, x)


def _ew(op):
    def build(store, rng):
        a, b = _pair(store, rng, 0.5, 1.5)
        return lambda: _sq(tensor.ew(op, a.tensor, b.tensor))
    return build


def _unary(fn, low=-1.0, high=1.0):
    def build(store, rng):
        a = store.create("a", rng.uniform(low, high, (1, 4, 4, 4)))
        return lambda: _sq(fn(a.tensor))
    return build


def _build_abs(store, rng):
    sign = np.where(rng.uniform(0, 1, (1, 4, 4, 4)) < 0.5, -1.0, 1.0)
    a = store.create("a", sign * rng.uniform(0.2, 1.0, (1, 4, 4, 4)))
    return lambda: _sq(tensor.abs_(a.tensor))


def _build_clamp(store, rng):
    a = store.create("a", _away_from(rng.uniform(0, 2, (1, 4, 4, 4)), 1.0, 1e-2))
    return lambda: _sq(tensor.clamp_min(a.tensor, 1.0))


def _build_concat_c(store, rng):
    a = store.create("a", rng.uniform(-1, 1, (1, 2, 4, 4)))
    b = store.create("b", rng.uniform(-1, 1, (1, 3, 4, 4)))
    return lambda: _sq(tensor.concat_c([a.tensor, b.tensor]))


def _build_split_c(store, rng):
    a = store.create("a", rng.uniform(-1, 1, (1, 6, 4, 4)))

    def f():
        p1, p2 = tensor.split_c(a.tensor, [2, 4])
        return _sq(p1) + tensor.scale(_sq(p2), 0.5)
    return f


def _build_concat_h(store, rng):
    a = store.create("a", rng.uniform(-1, 1, (1, 4, 2, 1)))
    b = store.create("b", rng.uniform(-1, 1, (1, 4, 5, 1)))
    return lambda: _sq(tensor.concat_h([a.tensor, b.tensor]))


def _build_split_h(store, rng):
    a = store.create("a", rng.uniform(-1, 1, (1, 4, 6, 1)))

    def f():
        p1, p2, p3 = tensor.split_h(a.tensor, [1, 2, 3])
        return _sq(p1) + _sq(p2) + tensor.scale(_sq(p3), 2.0)
    return f


def _build_expand(store, rng):
    a = store.create("a", rng.uniform(-1, 1, (1, 4, 1, 1)))
    return lambda: _sq(tensor.expand(a.tensor, (3, 4, 5, 1)))


def _upsample(mode, factor):
    def build(store, rng):
        a = store.create("a", rng.uniform(-1, 1, (1, 3, 4, 4)))
        return lambda: _sq(tensor.upsample(a.tensor, factor, mode))
    return build


def _build_channel_dot(store, rng):
    f = store.create("f", rng.uniform(-1, 1, (2, 5, 4, 4)))
    e = store.create("e", rng.uniform(-1, 1, (2, 5, 1, 1)))
    return lambda: _sq(tensor.channel_dot(f.tensor, e.tensor))


def _build_bce(store, rng):
    z = store.create("z", rng.uniform(-2, 2, (3, 1, 4, 4)))
    labels = (rng.uniform(0, 1, (3, 1, 4, 4)) > 0.5).astype(np.float64)
    weights = np.array([1.0, 0.0, 2.0])
    return lambda: tensor.bce_with_logits(z.tensor, labels, weights)


def _build_conv(store, rng):
    layer = layers.Conv2dLayer(store, "conv", 3, 4, 3, rng, stride=2, pad=1)
    x = store.create("x", rng.uniform(-1, 1, (2, 3, 6, 6)))
    return lambda: _sq(layer(x.tensor))


def _pool(mode, k, stride, pad):
    def build(store, rng):
        a = store.create("a", rng.uniform(-1, 1, (2, 3, 6, 6)))
        return lambda: _sq(layers.pool2d(a.tensor, mode, k, stride, pad))
    return build


def _build_linear(store, rng):
    layer = layers.LinearLayer(store, "lin", 6, 5, rng)
    x = store.create("x", rng.uniform(-1, 1, (2, 6, 3, 1)))
    return lambda: _sq(layer(x.tensor))


def _build_layer_norm(store, rng):
    layer = layers.LayerNorm(store, "ln", 6)
    x = store.create("x", rng.uniform(-1, 1, (2, 6, 3, 1)))
    return lambda: _sq(layer(x.tensor))


def _build_attention(store, rng):
    q = store.create("q", rng.uniform(-1, 1, (1, 8, 3, 1)))
    k = store.create("k", rng.uniform(-1, 1, (1, 8, 12, 1)))
    v = store.create("v", rng.uniform(-1, 1, (1, 8, 12, 1)))
    return lambda: _sq(layers.attention(q.tensor, k.tensor, v.tensor, heads=2))


def _build_mha(store, rng):
    layer = layers.AttentionLayer(store, "mha", 8, 2, rng)
    q = store.create("q", rng.uniform(-1, 1, (1, 8, 3, 1)))
    kv = store.create("kv", rng.uniform(-1, 1, (1, 8, 12, 1)))
    return lambda: _sq(layer(q.tensor, kv.tensor))


OP_CHECKS = {
    "add": _ew("add"),
    "sub": _ew("sub"),
    "mul": _ew("mul"),
    "div": _ew("div"),
    "scale": _unary(lambda t: tensor.scale(t, 1.7)),
    "add_scalar": _unary(lambda t: tensor.add_scalar(t, 0.3)),
    "abs": _build_abs,
    "sigmoid": _unary(tensor.sigmoid, -3, 3),
    "clamp_min": _build_clamp,
    "channel_mean": _unary(tensor.channel_mean),
    "channel_var": _unary(tensor.channel_var),
    "concat_c": _build_concat_c,
    "split_c": _build_split_c,
    "concat_h": _build_concat_h,
    "split_h": _build_split_h,
    "flatten_hw": _unary(tensor.flatten_hw),
    "expand": _build_expand,
    "upsample_nearest": _upsample("nearest", 2),
    "upsample_bilinear": _upsample("bilinear", 2),
    "channel_dot": _build_channel_dot,
    "mean_all": _unary(tensor.mean_all),
    "sum_all": _unary(tensor.sum_all),
    "bce_with_logits": _build_bce,
    "conv2d": _build_conv,
    "pool2d_avg": _pool("avg", 3, 2, 1),
    "pool2d_max": _pool("max", 2, 2, 0),
    "linear": _build_linear,
    "layer_norm": _build_layer_norm,
    "attention": _build_attention,
    "mha": _build_mha,
}


# -- block builders ------------------------------------------------------------

def _block(factory):
    def build(store, rng):
        blk = factory(store, rng)
        x = store.create("x", rng.uniform(-1, 1, (1, 8, 8, 8)))
        return lambda: _sq(blk(x.tensor))
    return build


def _build_mdfm(store, rng):
    blk = blocks.MdfmBlock(store, "mdfm", 8, rng)
    x1 = store.create("x1", rng.uniform(-1, 1, (1, 8, 8, 8)))
    x2 = store.create("x2", rng.uniform(-1, 1, (1, 8, 8, 8)))
    return lambda: _sq(blk(x1.tensor, x2.tensor))


BLOCK_CHECKS = {
    "msff": _block(lambda s, r: blocks.MsffBlock(s, "msff", 8, r)),
    "ssfc": _block(lambda s, r: blocks.SsfcBlock(s, "ssfc", 8, r)),
    "dmfe": _block(lambda s, r: blocks.DmfeBlock(s, "dmfe", 8, r)),
    "mdfm": _build_mdfm,
}


# -- runners -------------------------------------------------------------------

def run_ops(seeds=(1, 2, 3), n_coords=64):
    return [(name, max(_run(build, s, n_coords) for s in seeds))
            for name, build in OP_CHECKS.items()]


def run_blocks(seeds=(1, 2, 3), n_coords=64):
    return [(name, max(_run(build, s, n_coords) for s in seeds))
            for name, build in BLOCK_CHECKS.items()]


def run_network(seeds=(1, 2, 3), n_coords=5, cfg: ModelConfig | None = None):
    """End-to-end loss gradcheck over every parameter of the tiny config.

    The per-op and per-block suites above carry the 64-coordinate rigor;
    here the coordinate count per parameter is reduced so the whole-network
    sweep stays inside the suite's runtime budget.
    """
    from .tensor import bce_with_logits

    cfg = cfg or TINY_CONFIG
    results = []
    for seed in seeds:
        model = Model(cfg, dtype=np.float64)
        rng = Rng(seed)
        size = cfg.image_size
        a = rng.uniform(0, 1, (1, 3, size, size))
        b = rng.uniform(0, 1, (1, 3, size, size))
        labels = [(rng.uniform(0, 1, (1, 1, size, size)) > 0.5).astype(np.float64)
                  for _ in range(3)]

        def f():
            _, logits, _ = model.forward(Tensor(a), Tensor(b))
            total = None
            for z, y in zip(logits, labels):
                term = bce_with_logits(z, y)
                total = term if total is None else total + term
            return total

        err = max(fd_gradcheck(f, p, n_coords=n_coords, rng=rng.fork(i))
                  for i, p in enumerate(model.store))
        results.append((f"network(seed={seed})", err))
    return results


def run_scope(scope: str, seeds=(1, 2, 3)):
    if scope == "ops":
        return run_ops(seeds)
    if scope == "blocks":
        return run_blocks(seeds)
    if scope == "network":
        return run_network(seeds)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
